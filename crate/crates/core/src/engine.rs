//! Experiment orchestration: initial labeling, then train → evaluate →
//! select → annotate until the labeling budget is spent.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DomainDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{AspMtlModel, LabeledView, ModelConfig};
use crate::nn::RngStream;
use crate::pool::{ceil_fraction, PoolState};
use crate::strategies::{self, SelectionContext, StrategyKind, StrategyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Path to a dataset manifest; relative paths resolve against the config file.
    Manifest(PathBuf),
}

/// Model and optimizer settings that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingParams {
    #[serde(default = "defaults::hidden")]
    pub shared_hidden: usize,
    #[serde(default = "defaults::hidden")]
    pub private_hidden: usize,
    #[serde(default = "defaults::lambda_adv")]
    pub lambda_adv: f64,
    #[serde(default)]
    pub lambda_diff: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs_per_round: usize,
    /// Continue from the previous round's weights instead of reinitializing.
    #[serde(default)]
    pub warm_start: bool,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            shared_hidden: defaults::hidden(),
            private_hidden: defaults::hidden(),
            lambda_adv: defaults::lambda_adv(),
            lambda_diff: 0.0,
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            epochs_per_round: defaults::epochs(),
            warm_start: false,
        }
    }
}

impl TrainingParams {
    pub fn model_config(&self, input_dim: usize, num_classes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            input_dim,
            shared_hidden: self.shared_hidden,
            private_hidden: self.private_hidden,
            num_classes,
            lambda_adv: self.lambda_adv,
            lambda_diff: self.lambda_diff,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_per_round: self.epochs_per_round,
        }
    }
}

mod defaults {
    pub fn hidden() -> usize {
        64
    }
    pub fn lambda_adv() -> f64 {
        0.05
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn test_fraction() -> f64 {
        0.25
    }
    pub fn init_fraction() -> f64 {
        0.10
    }
    pub fn step_fraction() -> f64 {
        0.05
    }
    pub fn budget_fraction() -> f64 {
        0.50
    }
    pub fn seeds() -> Vec<u64> {
        (0..5).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    /// Defaults to on for manifest datasets, off for synthetic ones.
    #[serde(default)]
    pub standardize: Option<bool>,
    pub strategies: Vec<String>,
    #[serde(default)]
    pub strategy_params: StrategyParams,
    #[serde(default = "defaults::init_fraction")]
    pub init_fraction: f64,
    #[serde(default = "defaults::step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "defaults::budget_fraction")]
    pub budget_fraction: f64,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: TrainingParams,
}

impl ExperimentConfig {
    /// Every problem found, one `field: message` entry each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |field: &str, msg: String| out.push(format!("{field}: {msg}"));
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if let Err(e) = s.validate() {
                push("dataset.synthetic", e.to_string());
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            push("test_fraction", format!("must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.strategies.is_empty() {
            push("strategies", "at least one strategy is required".into());
        }
        for s in &self.strategies {
            if let Err(e) = s.parse::<StrategyKind>() {
                push("strategies", e.to_string());
            }
        }
        if let Err(e) = self.strategy_params.validate() {
            push("strategy_params", e.to_string());
        }
        if self.init_fraction.is_nan() || self.init_fraction <= 0.0 {
            push("init_fraction", format!("must be > 0, got {}", self.init_fraction));
        }
        if !(self.init_fraction <= self.budget_fraction && self.budget_fraction <= 1.0) {
            push(
                "budget_fraction",
                format!(
                    "must satisfy init_fraction <= budget_fraction <= 1, got {} with init_fraction {}",
                    self.budget_fraction, self.init_fraction
                ),
            );
        }
        if !(self.step_fraction > 0.0 && self.step_fraction.is_finite()) {
            push("step_fraction", format!("must be > 0, got {}", self.step_fraction));
        }
        if self.seeds.is_empty() {
            push("seeds", "at least one seed is required".into());
        }
        let cfg = self.model.model_config(1, vec![2]);
        if let Err(e) = cfg.validate() {
            push("model", e.to_string());
        }
        if self.model.epochs_per_round == 0 {
            push("model.epochs_per_round", "must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p.join("; ")))
        }
    }

    pub fn strategy_kinds(&self) -> Result<Vec<(String, StrategyKind)>> {
        self.strategies
            .iter()
            .map(|s| Ok((s.clone(), s.parse()?)))
            .collect()
    }
}

/// Train pools and test sets of one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub train: Vec<Arc<DomainDataset>>,
    pub test: Vec<DomainDataset>,
}

impl PreparedData {
    pub fn input_dim(&self) -> usize {
        self.train[0].dim()
    }

    pub fn num_classes(&self) -> Vec<usize> {
        self.train.iter().map(|d| d.classes).collect()
    }
}

pub fn dataset_name(config: &ExperimentConfig) -> Result<String> {
    Ok(match &config.dataset {
        DatasetSource::Synthetic(s) => s.name.clone(),
        DatasetSource::Manifest(p) => data::load_manifest(p)?.name,
    })
}

/// Loads or generates the domains and splits them into train/test with the
/// seed's `split` stream.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (name, domains, standardize_default) = match &config.dataset {
        DatasetSource::Synthetic(spec) => (spec.name.clone(), data::generate_synthetic(spec)?, false),
        DatasetSource::Manifest(path) => {
            let m = data::load_manifest(path)?;
            let domains = data::load_all(&m)?;
            (m.name, domains, true)
        }
    };
    let split = RngStream::new(seed, "split");
    let mut train = Vec::with_capacity(domains.len());
    let mut test = Vec::with_capacity(domains.len());
    for d in &domains {
        let (tr, te) =
            data::train_test_split(d, config.test_fraction, &mut split.derive(&format!("domain{}", d.domain)))?;
        train.push(tr);
        test.push(te);
    }
    if config.standardize.unwrap_or(standardize_default) {
        let (tr, te, _) = data::standardize(&train, &test)?;
        train = tr;
        test = te;
    }
    Ok(PreparedData {
        name,
        train: train.into_iter().map(Arc::new).collect(),
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled_per_domain: Vec<usize>,
    pub labeled_total: usize,
    pub labeled_frac: f64,
    pub acc_per_domain: Vec<f64>,
    pub acc_macro: f64,
    /// Wall time of the selection that produced this round's labeled set;
    /// for round 0 that is the initial random labeling.
    pub select_seconds: f64,
    pub train_seconds: f64,
}

#[derive(Debug)]
pub struct RunFailure {
    /// Rounds completed before the failure.
    pub records: Vec<RoundRecord>,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "failed after {} round(s): {}", self.records.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            records: Vec::new(),
            error,
        }
    }
}

/// One full active-learning run of `strategy` under `seed`.
pub fn run_experiment(
    config: &ExperimentConfig,
    strategy: StrategyKind,
    seed: u64,
) -> Result<Vec<RoundRecord>, RunFailure> {
    config.validate()?;
    let data = prepare_data(config, seed)?;
    run_on_data(config, &data, strategy, seed)
}

pub fn run_on_data(
    config: &ExperimentConfig,
    data: &PreparedData,
    strategy: StrategyKind,
    seed: u64,
) -> Result<Vec<RoundRecord>, RunFailure> {
    let rng = RngStream::new(seed, "run");
    let model_config = config
        .model
        .model_config(data.input_dim(), data.num_classes());
    model_config.validate()?;

    let started = Instant::now();
    let mut pool = PoolState::init_split(
        data.train.clone(),
        config.init_fraction,
        &mut rng.derive("init-split"),
    )?;
    let mut select_seconds = started.elapsed().as_secs_f64();

    let total = pool.total();
    let step = ceil_fraction(config.step_fraction, total).max(1);
    let target = config.budget_fraction * total as f64;
    let mut records = Vec::new();
    let mut model: Option<AspMtlModel> = None;

    for round in 0.. {
        let outcome = (|| -> Result<Option<f64>> {
            let train_started = Instant::now();
            let mut m = match model.take() {
                Some(m) if config.model.warm_start => m,
                _ => AspMtlModel::new(
                    model_config.clone(),
                    &mut rng.derive(&format!("init/round{round}")),
                )?,
            };
            let rows: Vec<Vec<usize>> = pool
                .domains()
                .iter()
                .map(|d| d.labeled().iter().copied().collect())
                .collect();
            let views: Vec<LabeledView<'_>> = pool
                .domains()
                .iter()
                .zip(&rows)
                .map(|(d, r)| LabeledView {
                    features: &d.data.features,
                    labels: &d.data.labels,
                    rows: r,
                })
                .collect();
            let pools: Vec<_> = pool.domains().iter().map(|d| &d.data.features).collect();
            m.train_round(&views, &pools, &mut rng.derive(&format!("train/round{round}")))?;
            let train_seconds = train_started.elapsed().as_secs_f64();

            let eval = m.evaluate(&data.test)?;
            let labeled_total = pool.labeled_total();
            records.push(RoundRecord {
                round,
                labeled_per_domain: pool.labeled_counts(),
                labeled_total,
                labeled_frac: labeled_total as f64 / total as f64,
                acc_per_domain: eval.per_domain,
                acc_macro: eval.macro_accuracy,
                select_seconds,
                train_seconds,
            });

            if labeled_total as f64 >= target - 1e-9 || pool.unlabeled_total() == 0 {
                return Ok(None);
            }
            let budget = step.min(pool.unlabeled_total());
            let ctx = SelectionContext::new(
                &m,
                &pool,
                budget,
                rng.derive(&format!("select/round{round}")),
                config.strategy_params,
            );
            let select_started = Instant::now();
            let batch = strategies::select(strategy, &ctx)?;
            let elapsed = select_started.elapsed().as_secs_f64();
            pool.annotate(&batch)?;
            model = Some(m);
            Ok(Some(elapsed))
        })();
        match outcome {
            Ok(Some(elapsed)) => select_seconds = elapsed,
            Ok(None) => break,
            Err(error) => return Err(RunFailure { records, error }),
        }
    }
    Ok(records)
}

/// Trapezoidal area under macro accuracy vs. labeled count, divided by the
/// span of the labeled-count axis. A single point yields its own accuracy.
pub fn compute_aulc(records: &[RoundRecord]) -> f64 {
    let points: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.labeled_total as f64, r.acc_macro))
        .collect();
    aulc_of_points(&points)
}

pub fn aulc_of_points(points: &[(f64, f64)]) -> f64 {
    match points {
        [] => 0.0,
        [(_, y)] => *y,
        _ => {
            let span = points[points.len() - 1].0 - points[0].0;
            if span <= 0.0 {
                return points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
            }
            let area: f64 = points
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum();
            area / span
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub labeled: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AulcSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub mean_curve: Vec<CurvePoint>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates learning curves given as `(labeled, accuracy)` points. All
/// curves must share the same labeled-count axis.
pub fn aggregate_curves(curves: &[Vec<(f64, f64)>]) -> Result<AulcSummary> {
    let first = curves
        .first()
        .ok_or_else(|| Error::validation("no curves to aggregate"))?;
    for (i, c) in curves.iter().enumerate() {
        if c.len() != first.len() || c.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::validation(format!(
                "curve {i} has a different round structure than curve 0"
            )));
        }
    }
    let per_seed: Vec<f64> = curves.iter().map(|c| aulc_of_points(c)).collect();
    let (mean, std) = mean_std(&per_seed);
    let mean_curve = (0..first.len())
        .map(|r| {
            let ys: Vec<f64> = curves.iter().map(|c| c[r].1).collect();
            let (m, s) = mean_std(&ys);
            CurvePoint {
                labeled: first[r].0,
                mean: m,
                std: s,
            }
        })
        .collect();
    Ok(AulcSummary {
        per_seed,
        mean,
        std,
        mean_curve,
    })
}

pub fn aggregate_seeds(runs: &[Vec<RoundRecord>]) -> Result<AulcSummary> {
    let curves: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| r.iter().map(|x| (x.labeled_total as f64, x.acc_macro)).collect())
        .collect();
    aggregate_curves(&curves)
}

/// One cell of the strategy × seed grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub strategy_name: String,
    pub strategy: StrategyKind,
    pub seed: u64,
}

pub fn grid(config: &ExperimentConfig) -> Result<Vec<RunSpec>> {
    let mut out = Vec::new();
    for (name, kind) in config.strategy_kinds()? {
        for &seed in &config.seeds {
            out.push(RunSpec {
                strategy_name: name.clone(),
                strategy: kind,
                seed,
            });
        }
    }
    Ok(out)
}

/// Runs every grid cell on a pool of `jobs` threads, calling `on_done` from
/// the worker as each run finishes. Results come back in grid order.
pub fn run_grid<F>(
    config: &ExperimentConfig,
    specs: &[RunSpec],
    jobs: usize,
    on_done: F,
) -> Result<Vec<Result<Vec<RoundRecord>, RunFailure>>>
where
    F: Fn(&RunSpec, &Result<Vec<RoundRecord>, RunFailure>) + Sync,
{
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let res = run_experiment(config, spec.strategy, spec.seed);
                on_done(spec, &res);
                res
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(labeled: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            round: 0,
            labeled_per_domain: vec![labeled],
            labeled_total: labeled,
            labeled_frac: 0.0,
            acc_per_domain: vec![acc],
            acc_macro: acc,
            select_seconds: 0.0,
            train_seconds: 0.0,
        }
    }

    #[test]
    fn aulc_examples() {
        let flat: Vec<_> = (0..5).map(|i| record(10 + 5 * i, 0.8)).collect();
        assert!((compute_aulc(&flat) - 0.8).abs() < 1e-15);
        assert!((compute_aulc(&[record(10, 0.6), record(20, 0.8)]) - 0.7).abs() < 1e-15);
        let three = [record(10, 0.5), record(20, 0.7), record(30, 0.9)];
        assert!((compute_aulc(&three) - 0.7).abs() < 1e-15);
        assert_eq!(compute_aulc(&[record(3, 0.42)]), 0.42);
    }

    #[test]
    fn aulc_ignores_axis_scale() {
        let pts = [(10.0, 0.5), (25.0, 0.65), (30.0, 0.9)];
        let scaled: Vec<_> = pts.iter().map(|&(x, y)| (x * 7.5, y)).collect();
        assert!((aulc_of_points(&pts) - aulc_of_points(&scaled)).abs() < 1e-14);
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate_curves(&[vec![(1.0, 0.5), (2.0, 0.7)]]).unwrap();
        assert_eq!(one.std, 0.0);
        let s = aggregate_curves(&[vec![(1.0, 80.0)], vec![(1.0, 82.0)]]).unwrap();
        assert_eq!((s.mean, s.std), (81.0, 1.0));
        let swapped = aggregate_curves(&[vec![(1.0, 82.0)], vec![(1.0, 80.0)]]).unwrap();
        assert_eq!((swapped.mean, swapped.std), (s.mean, s.std));
        assert!(aggregate_curves(&[vec![(1.0, 0.5)], vec![(2.0, 0.5)]]).is_err());
        assert!(aggregate_curves(&[]).is_err());
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset":{"synthetic":{"domains":2,"samples_per_domain":40,"dim":3,
                "shared_strength":2.0,"shift_strength":1.0}},"strategies":["random"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.init_fraction, 0.10);
        assert_eq!(cfg.model.batch_size, 8);
        assert_eq!(cfg.strategy_params.samples, 20);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_problems_name_fields() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset":{"synthetic":{"domains":2,"samples_per_domain":40,"dim":3,
                "shared_strength":2.0,"shift_strength":1.0}},"strategies":["nope"],
                "init_fraction":0.6}"#,
        )
        .unwrap();
        let p = cfg.problems().join("\n");
        assert!(p.contains("strategies:"), "{p}");
        assert!(p.contains("budget_fraction:"), "{p}");
    }
}
