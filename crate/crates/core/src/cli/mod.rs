//! `mdalbench` command line: run, synth, report, curves.

pub mod results;
pub mod svg;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{self, DatasetManifest, DomainEntry, SyntheticSpec};
use crate::engine::{self, aggregate_curves, DatasetSource, ExperimentConfig};
use crate::error::Error;
use crate::strategies::StrategyKind;
use results::{load_runs, run_paths, run_stem, write_run, RunMetadata};

pub const SEED_ENV: &str = "MDALBENCH_SEED";

#[derive(Debug, Parser)]
#[command(name = "mdalbench", version, about = "Multi-domain active learning benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the strategy x seed grid of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; replaces the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated strategy names; replaces the config's list.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        /// Worker threads for the grid (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Overwrite existing run files.
        #[arg(long)]
        force: bool,
    },
    /// Generate a synthetic dataset as per-domain CSVs plus a manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AULC table over all runs in a results directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Mean learning curves (CSV) and one SVG plot per dataset.
    Curves { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Runtime(String),
    Invalid(String),
    Refused(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Refused(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Runtime(m) | CliError::Invalid(m) | CliError::Refused(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(_) | Error::Usage(_) | Error::Parse { .. } | Error::Json { .. } => {
                CliError::Invalid(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Curve = Vec<(f64, f64)>;

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command, returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            strategies,
            jobs,
            force,
        } => cmd_run(&config, &out, &RunOptions {
            seeds,
            strategies,
            jobs,
            force,
        }),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Report { dir, format } => cmd_report(&dir, format).map(|t| print!("{t}")),
        Command::Curves { dir } => cmd_curves(&dir).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub strategies: Option<Vec<String>>,
    pub jobs: Option<usize>,
    pub force: bool,
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::Invalid(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: invalid JSON: {e}", path.display())))
}

/// Reads the config, applies the seed fallback and command-line overrides,
/// and resolves a relative manifest path against the config's directory.
pub fn load_config(path: &Path, opts: &RunOptions) -> CliResult<ExperimentConfig> {
    let mut value = read_json(path)?;
    if let (Some(obj), Some(seed)) = (value.as_object_mut(), env_seed()?) {
        obj.entry("seeds").or_insert_with(|| serde_json::json!([seed]));
    }
    let mut config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if let Some(s) = &opts.seeds {
        config.seeds = s.clone();
    }
    if let Some(s) = &opts.strategies {
        config.strategies = s.clone();
    }
    if let DatasetSource::Manifest(p) = &mut config.dataset {
        if p.is_relative() {
            *p = path.parent().unwrap_or(Path::new("")).join(&*p);
        }
    }
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(CliError::Invalid(format!(
            "{}: invalid config\n  {}",
            path.display(),
            problems.join("\n  ")
        )));
    }
    Ok(config)
}

pub fn cmd_run(config_path: &Path, out: &Path, opts: &RunOptions) -> CliResult {
    let config = load_config(config_path, opts)?;
    let dataset = engine::dataset_name(&config)?;
    let specs = engine::grid(&config)?;
    let num_domains = match &config.dataset {
        DatasetSource::Synthetic(s) => s.domains,
        DatasetSource::Manifest(p) => data::load_manifest(p)?.domains.len(),
    };

    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    if !opts.force {
        let existing: Vec<String> = specs
            .iter()
            .flat_map(|s| {
                let (c, j) = run_paths(out, &run_stem(&dataset, &s.strategy_name, s.seed));
                [c, j]
            })
            .filter(|p| p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !existing.is_empty() {
            return Err(CliError::Refused(format!(
                "refusing to overwrite {} existing run file(s), e.g. {}; pass --force to replace them",
                existing.len(),
                existing[0]
            )));
        }
    }

    let jobs = opts.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let write_errors = Mutex::new(Vec::new());
    let outcomes = engine::run_grid(&config, &specs, jobs, |spec, res| {
        let stem = run_stem(&dataset, &spec.strategy_name, spec.seed);
        let (records, err) = match res {
            Ok(r) => (r.as_slice(), None),
            Err(f) => (f.records.as_slice(), Some(f.error.to_string())),
        };
        let meta = RunMetadata::new(&config, &dataset, &spec.strategy_name, spec.seed, records, err);
        match write_run(out, &stem, records, num_domains, &meta) {
            Ok(()) => {
                if let Ok(r) = res {
                    eprintln!(
                        "done {stem}: {} rounds, AULC {:.2}",
                        r.len(),
                        100.0 * engine::compute_aulc(r)
                    );
                }
            }
            Err(e) => write_errors.lock().expect("lock").push(format!("{stem}: {e}")),
        }
    })?;

    let mut failures: Vec<String> = specs
        .iter()
        .zip(&outcomes)
        .filter_map(|(s, r)| {
            r.as_ref()
                .err()
                .map(|f| format!("{} seed {}: {f}", s.strategy_name, s.seed))
        })
        .collect();
    failures.extend(write_errors.into_inner().expect("lock"));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} of {} run(s) failed:\n  {}",
            failures.len(),
            specs.len(),
            failures.join("\n  ")
        )))
    }
}

pub fn cmd_synth(spec_path: &Path, out: &Path) -> CliResult {
    let mut value = read_json(spec_path)?;
    if let (Some(obj), Some(seed)) = (value.as_object_mut(), env_seed()?) {
        obj.entry("seed").or_insert_with(|| serde_json::json!(seed));
    }
    let spec: SyntheticSpec = serde_json::from_value(value)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", spec_path.display())))?;
    spec.validate()?;
    let domains = data::generate_synthetic(&spec)?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut entries = Vec::new();
    for d in &domains {
        let file = PathBuf::from(format!("domain{}.csv", d.domain));
        data::write_csv(&out.join(&file), &d.features, &d.labels)?;
        entries.push(DomainEntry {
            name: d.name.clone(),
            file,
            classes: d.classes,
        });
    }
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        dim: spec.dim,
        domains: entries,
        base_dir: PathBuf::new(),
    };
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// AULC summary of one (dataset, strategy) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    /// Percent.
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

impl ReportCell {
    pub fn formatted(&self) -> String {
        format!("{:.2}({:.2})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub datasets: Vec<String>,
    pub strategies: Vec<String>,
    pub cells: BTreeMap<(String, String), ReportCell>,
    /// Mean selection wall time per round, by strategy.
    pub select_seconds: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Recomputes every AULC from the run CSVs in `dir`.
pub fn build_report(dir: &Path) -> CliResult<Report> {
    if !dir.is_dir() {
        return Err(CliError::Invalid(format!("{} is not a directory", dir.display())));
    }
    let (runs, warnings) = load_runs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Invalid(format!("no run files in {}", dir.display())));
    }
    let mut groups: BTreeMap<(String, String), Vec<_>> = BTreeMap::new();
    let mut timings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &runs {
        groups
            .entry((run.dataset.clone(), run.strategy.clone()))
            .or_default()
            .push(run.points());
        if let Some(t) = run.select_seconds() {
            timings.entry(run.strategy.clone()).or_default().extend(t);
        }
    }
    let mut report = Report {
        warnings,
        ..Report::default()
    };
    for ((dataset, strategy), curves) in groups {
        let s = aggregate_curves(&curves)
            .map_err(|e| CliError::Invalid(format!("{dataset}/{strategy}: {e}")))?;
        if !report.datasets.contains(&dataset) {
            report.datasets.push(dataset.clone());
        }
        if !report.strategies.contains(&strategy) {
            report.strategies.push(strategy.clone());
        }
        report.cells.insert(
            (dataset, strategy),
            ReportCell {
                mean: 100.0 * s.mean,
                std: 100.0 * s.std,
                seeds: curves.len(),
            },
        );
    }
    report.datasets.sort();
    report.strategies.sort_by_key(|s| strategy_order(s));
    for (strategy, t) in timings {
        if !t.is_empty() {
            report
                .select_seconds
                .insert(strategy, t.iter().sum::<f64>() / t.len() as f64);
        }
    }
    Ok(report)
}

fn strategy_order(name: &str) -> (usize, String) {
    let pos = StrategyKind::NAMES
        .iter()
        .position(|n| *n == name)
        .unwrap_or(StrategyKind::NAMES.len());
    (pos, name.to_string())
}

impl Report {
    fn best(&self, dataset: &str) -> Option<f64> {
        self.strategies
            .iter()
            .filter_map(|s| self.cells.get(&(dataset.to_string(), s.clone())))
            .map(|c| c.mean)
            .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))))
    }

    fn timing(&self, strategy: &str) -> String {
        self.select_seconds
            .get(strategy)
            .map_or_else(|| "n/a".to_string(), |t| format!("{t:.4}"))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for d in &self.datasets {
            write!(out, ",{d}").unwrap();
        }
        out.push_str(",select_seconds_per_round\n");
        for s in &self.strategies {
            out.push_str(s);
            for d in &self.datasets {
                let cell = self.cells.get(&(d.clone(), s.clone()));
                write!(out, ",{}", cell.map(ReportCell::formatted).unwrap_or_default()).unwrap();
            }
            writeln!(out, ",{}", self.timing(s)).unwrap();
        }
        out
    }

    /// Aligned table; the best mean per dataset column is marked with `*`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["strategy".to_string()];
        header.extend(self.datasets.iter().cloned());
        header.push("select_s/round".to_string());
        let mut rows = vec![header];
        for s in &self.strategies {
            let mut row = vec![s.clone()];
            for d in &self.datasets {
                row.push(match self.cells.get(&(d.clone(), s.clone())) {
                    Some(c) => {
                        let flag = if Some(c.mean) == self.best(d) { "*" } else { "" };
                        format!("{}{flag}", c.formatted())
                    }
                    None => "-".to_string(),
                });
            }
            row.push(self.timing(s));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    if c == 0 {
                        format!("{v:<w$}")
                    } else {
                        format!("{v:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str("AULC in percent as mean(std) over seeds; * marks the best per column\n");
        out
    }
}

pub fn cmd_report(dir: &Path, format: ReportFormat) -> CliResult<String> {
    let report = build_report(dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Text => report.to_text(),
    })
}

/// Writes `curves/<dataset>__<strategy>.csv` per cell and
/// `curves/<dataset>.svg` per dataset; returns the written paths.
pub fn cmd_curves(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Invalid(format!("{} is not a directory", dir.display())));
    }
    let (runs, warnings) = load_runs(dir)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if runs.is_empty() {
        return Err(CliError::Invalid(format!("no run files in {}", dir.display())));
    }
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<Curve>>> = BTreeMap::new();
    for run in &runs {
        groups
            .entry(run.dataset.clone())
            .or_default()
            .entry(run.strategy.clone())
            .or_default()
            .push(run.points());
    }
    let out_dir = dir.join("curves");
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let write = |path: PathBuf, text: String| -> CliResult<PathBuf> {
        fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    };
    let mut written = Vec::new();
    for (dataset, strategies) in groups {
        let mut ordered: Vec<_> = strategies.into_iter().collect();
        ordered.sort_by_key(|(s, _)| strategy_order(s));
        let mut plotted = Vec::new();
        for (strategy, curves) in ordered {
            let s = aggregate_curves(&curves)
                .map_err(|e| CliError::Invalid(format!("{dataset}/{strategy}: {e}")))?;
            let mut csv = String::from("labeled,mean_acc,std_acc\n");
            for p in &s.mean_curve {
                writeln!(csv, "{},{:?},{:?}", p.labeled, p.mean, p.std).unwrap();
            }
            written.push(write(out_dir.join(format!("{dataset}__{strategy}.csv")), csv)?);
            plotted.push((strategy, s.mean_curve));
        }
        let svg = svg::learning_curves_svg(&dataset, &plotted);
        written.push(write(out_dir.join(format!("{dataset}.svg")), svg)?);
    }
    Ok(written)
}
