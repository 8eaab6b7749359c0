//! Per-run result files: a deterministic CSV plus a metadata JSON sidecar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentConfig, RoundRecord};
use crate::error::{Error, Result};

pub const METADATA_FORMAT: u32 = 1;

/// `<dataset>__<strategy>__seed<seed>`
pub fn run_stem(dataset: &str, strategy: &str, seed: u64) -> String {
    format!("{}__{strategy}__seed{seed}", sanitize(dataset))
}

/// Inverse of [`run_stem`].
pub fn parse_run_stem(stem: &str) -> Option<(String, String, u64)> {
    let mut parts = stem.rsplitn(3, "__");
    let seed = parts.next()?.strip_prefix("seed")?.parse().ok()?;
    let strategy = parts.next()?.to_string();
    let dataset = parts.next()?.to_string();
    if dataset.is_empty() || strategy.is_empty() {
        return None;
    }
    Some((dataset, strategy, seed))
}

pub fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Header and rows of the per-run CSV. Timings stay out of it so that
/// identical inputs give identical bytes.
pub fn records_csv(records: &[RoundRecord], num_domains: usize) -> String {
    let mut out = String::from("round,labeled_total,labeled_frac");
    for k in 0..num_domains {
        write!(out, ",acc_domain_{k}").expect("string write");
    }
    out.push_str(",acc_macro\n");
    for r in records {
        write!(out, "{},{},{:?}", r.round, r.labeled_total, r.labeled_frac).expect("string write");
        for a in &r.acc_per_domain {
            write!(out, ",{a:?}").expect("string write");
        }
        writeln!(out, ",{:?}", r.acc_macro).expect("string write");
    }
    out
}

/// One row of a per-run CSV as the report needs it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub round: usize,
    pub labeled_total: usize,
    pub acc_macro: f64,
}

pub fn parse_records_csv(path: &Path, text: &str) -> Result<Vec<CurveRow>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        cols.iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name}")))
    };
    let (c_round, c_labeled, c_acc) = (col("round")?, col("labeled_total")?, col("acc_macro")?);
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                i + 1,
                format!("{} fields, header has {}", fields.len(), cols.len()),
            ));
        }
        let field = |c: usize| fields[c].trim();
        let round = field(c_round)
            .parse()
            .map_err(|e| parse_err(i + 1, format!("round: {e}")))?;
        let labeled_total = field(c_labeled)
            .parse()
            .map_err(|e| parse_err(i + 1, format!("labeled_total: {e}")))?;
        let acc_macro: f64 = field(c_acc)
            .parse()
            .map_err(|e| parse_err(i + 1, format!("acc_macro: {e}")))?;
        if !acc_macro.is_finite() {
            return Err(parse_err(i + 1, "acc_macro is not finite".into()));
        }
        rows.push(CurveRow {
            round,
            labeled_total,
            acc_macro,
        });
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no rounds".into()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

/// Run-dependent values that are expected to differ between reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volatile {
    pub written_at_unix: f64,
    pub select_seconds: Vec<f64>,
    pub train_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub format: u32,
    pub code_version: String,
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub rounds: usize,
    pub labeled_per_domain: Vec<Vec<usize>>,
    pub config: ExperimentConfig,
    pub volatile: Volatile,
}

impl RunMetadata {
    pub fn new(
        config: &ExperimentConfig,
        dataset: &str,
        strategy: &str,
        seed: u64,
        records: &[RoundRecord],
        error: Option<String>,
    ) -> Self {
        let written_at_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            format: METADATA_FORMAT,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: dataset.to_string(),
            strategy: strategy.to_string(),
            seed,
            status: if error.is_some() {
                RunStatus::Failed
            } else {
                RunStatus::Complete
            },
            error,
            rounds: records.len(),
            labeled_per_domain: records.iter().map(|r| r.labeled_per_domain.clone()).collect(),
            config: config.clone(),
            volatile: Volatile {
                written_at_unix,
                select_seconds: records.iter().map(|r| r.select_seconds).collect(),
                train_seconds: records.iter().map(|r| r.train_seconds).collect(),
            },
        }
    }
}

pub fn run_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
}

pub fn write_run(
    dir: &Path,
    stem: &str,
    records: &[RoundRecord],
    num_domains: usize,
    meta: &RunMetadata,
) -> Result<()> {
    let (csv, json) = run_paths(dir, stem);
    fs::write(&csv, records_csv(records, num_domains)).map_err(|e| Error::io(&csv, e))?;
    let mut text = serde_json::to_string_pretty(meta).map_err(|source| Error::Json {
        path: json.clone(),
        source,
    })?;
    text.push('\n');
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// A run file found in a results directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub rows: Vec<CurveRow>,
    pub meta: Option<RunMetadata>,
}

impl LoadedRun {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .map(|r| (r.labeled_total as f64, r.acc_macro))
            .collect()
    }

    pub fn select_seconds(&self) -> Option<&[f64]> {
        self.meta.as_ref().map(|m| m.volatile.select_seconds.as_slice())
    }
}

/// Every run CSV in `dir`, sorted by (dataset, strategy, seed). Runs whose
/// metadata marks them failed are skipped.
pub fn load_runs(dir: &Path) -> Result<(Vec<LoadedRun>, Vec<String>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut warnings = Vec::new();
    let mut found = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some((dataset, strategy, seed)) = parse_run_stem(stem) else {
            continue;
        };
        found.insert((dataset, strategy, seed), path);
    }
    let mut runs = Vec::new();
    for ((dataset, strategy, seed), path) in found {
        let meta_path = path.with_extension("json");
        let meta = match fs::read_to_string(&meta_path) {
            Ok(t) => match serde_json::from_str::<RunMetadata>(&t) {
                Ok(m) => Some(m),
                Err(e) => {
                    warnings.push(format!("{}: unreadable metadata: {e}", meta_path.display()));
                    None
                }
            },
            Err(_) => None,
        };
        if meta.as_ref().is_some_and(|m| m.status == RunStatus::Failed) {
            warnings.push(format!("{}: run failed, skipped", path.display()));
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = parse_records_csv(&path, &text)?;
        runs.push(LoadedRun {
            dataset,
            strategy,
            seed,
            rows,
            meta,
        });
    }
    Ok((runs, warnings))
}
