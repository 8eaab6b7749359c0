//! Acquisition strategies behind one selection entry point.
//!
//! Conventional baselines (`bvsb`, `egl`, `coreset`, `badge`) rank the whole
//! unlabeled pool at once. `random` and the two-stage family first split the
//! round budget across domains in proportion to their unlabeled counts. The
//! two-stage family then clusters each domain's gradient embeddings into one
//! region per budget unit and queries the best-scoring item of every region.

mod baselines;
mod budget;
mod kmeans;
mod two_stage;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AspMtlModel, DomainOutputs};
use crate::nn::{Matrix, RngStream};
use crate::pool::{ItemRef, PoolState, QueryBatch};

pub use baselines::{
    badge_select, bvsb_select, coreset_select, egl_score, egl_select, margin, random_select,
};
pub use budget::allocate_budget;
pub use kmeans::{assign, kmeans, kmeanspp_seed, sse, KMeansResult, MAX_LLOYD_ITERATIONS};
pub use two_stage::{
    build_regions, p2s_select, perturbation_score, perturbation_score_from_features,
    two_stage_variant_select, DomainRegions, RegionPartition,
};

/// Which counts drive the per-domain budget split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetCounts {
    /// Unlabeled items remaining in each domain at selection time.
    #[default]
    Unlabeled,
    /// Full pool size of each domain.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyParams {
    /// Standard deviation of the Gaussian perturbation of the shared feature.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Perturbation draws per item.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub budget_counts: BudgetCounts,
}

fn default_sigma() -> f64 {
    0.01
}

fn default_samples() -> usize {
    20
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            samples: default_samples(),
            budget_counts: BudgetCounts::default(),
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.samples == 0 {
            return Err(Error::validation("perturbation samples must be >= 1"));
        }
        Ok(())
    }
}

/// Second-stage item scorer of the two-stage pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionScorer {
    /// Nearest to the region centroid in embedding space.
    Center,
    /// Smallest top-2 probability margin.
    Bvsb,
    /// Largest expected gradient length.
    Egl,
    /// Largest expected KL divergence under shared-feature perturbation.
    Perturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Random,
    Bvsb,
    Egl,
    Coreset,
    Badge,
    P2s,
    TwoStage { scorer: RegionScorer, regions: bool },
}

impl StrategyKind {
    pub const NAMES: [&'static str; 11] = [
        "random",
        "bvsb",
        "egl",
        "coreset",
        "badge",
        "p2s",
        "2s-center",
        "2s-bvsb",
        "2s-egl",
        "p2s-no-region",
        "p2s-no-perturb",
    ];
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use RegionScorer::*;
        let two = |scorer, regions| StrategyKind::TwoStage { scorer, regions };
        Ok(match s {
            "random" => StrategyKind::Random,
            "bvsb" => StrategyKind::Bvsb,
            "egl" => StrategyKind::Egl,
            "coreset" => StrategyKind::Coreset,
            "badge" => StrategyKind::Badge,
            "p2s" => StrategyKind::P2s,
            // without perturbation the region winner is the centroid-nearest item
            "2s-center" | "p2s-no-perturb" => two(Center, true),
            "2s-bvsb" => two(Bvsb, true),
            "2s-egl" => two(Egl, true),
            "p2s-no-region" => two(Perturbation, false),
            other => {
                return Err(Error::validation(format!(
                    "unknown strategy {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use RegionScorer::*;
        let s = match self {
            StrategyKind::Random => "random",
            StrategyKind::Bvsb => "bvsb",
            StrategyKind::Egl => "egl",
            StrategyKind::Coreset => "coreset",
            StrategyKind::Badge => "badge",
            StrategyKind::P2s => "p2s",
            StrategyKind::TwoStage { scorer, regions: true } => match scorer {
                Center => "2s-center",
                Bvsb => "2s-bvsb",
                Egl => "2s-egl",
                Perturbation => "p2s",
            },
            StrategyKind::TwoStage { scorer, regions: false } => match scorer {
                Center => "2s-center-no-region",
                Bvsb => "2s-bvsb-no-region",
                Egl => "2s-egl-no-region",
                Perturbation => "p2s-no-region",
            },
        };
        f.write_str(s)
    }
}

/// Everything a strategy may look at. The model and pool are borrowed
/// immutably for the whole selection.
#[derive(Debug, Clone)]
pub struct SelectionContext<'a> {
    pub model: &'a AspMtlModel,
    pub pool: &'a PoolState,
    pub budget: usize,
    pub rng: RngStream,
    pub params: StrategyParams,
}

impl<'a> SelectionContext<'a> {
    pub fn new(
        model: &'a AspMtlModel,
        pool: &'a PoolState,
        budget: usize,
        rng: RngStream,
        params: StrategyParams,
    ) -> Self {
        Self {
            model,
            pool,
            budget,
            rng,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::validation("round budget must be >= 1"));
        }
        let available = self.pool.unlabeled_total();
        if self.budget > available {
            return Err(Error::validation(format!(
                "round budget {} exceeds the {available} unlabeled items",
                self.budget
            )));
        }
        if self.pool.num_domains() != self.model.num_domains() {
            return Err(Error::validation(format!(
                "pool has {} domains, model has {}",
                self.pool.num_domains(),
                self.model.num_domains()
            )));
        }
        self.params.validate()
    }

    /// Per-domain budget split for the current round.
    pub fn domain_budgets(&self) -> Result<Vec<usize>> {
        let capacity = self.pool.unlabeled_counts();
        let weights = match self.params.budget_counts {
            BudgetCounts::Unlabeled => capacity.clone(),
            BudgetCounts::Pool => self.pool.pool_sizes(),
        };
        allocate_budget(&weights, &capacity, self.budget)
    }

    /// Unlabeled indices of domain `k` and the model outputs on them.
    pub(crate) fn unlabeled_outputs(&self, k: usize) -> Result<(Vec<usize>, DomainOutputs)> {
        let d = self.pool.domain(k);
        let idx: Vec<usize> = d.unlabeled().iter().copied().collect();
        let x = d.data.features.select_rows(&idx);
        Ok((idx, self.model.domain_outputs(&x, k)?))
    }

    pub(crate) fn features_of(&self, k: usize, idx: &[usize]) -> Matrix {
        self.pool.domain(k).data.features.select_rows(idx)
    }
}

/// Runs the named strategy; returns exactly `ctx.budget` distinct unlabeled items.
pub fn select(kind: StrategyKind, ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    ctx.validate()?;
    let batch = match kind {
        StrategyKind::Random => random_select(ctx)?,
        StrategyKind::Bvsb => bvsb_select(ctx)?,
        StrategyKind::Egl => egl_select(ctx)?,
        StrategyKind::Coreset => coreset_select(ctx)?,
        StrategyKind::Badge => badge_select(ctx)?,
        StrategyKind::P2s => p2s_select(ctx)?,
        StrategyKind::TwoStage { scorer, regions } => {
            two_stage_variant_select(ctx, scorer, regions)?
        }
    };
    debug_assert_eq!(batch.len(), ctx.budget);
    Ok(batch)
}

/// Sorts `(utility, item)` pairs best-first: higher utility, then lower item.
pub(crate) fn rank_desc(scored: &mut [(f64, ItemRef)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

pub(crate) fn top_items(mut scored: Vec<(f64, ItemRef)>, n: usize) -> QueryBatch {
    rank_desc(&mut scored);
    QueryBatch::new(scored.into_iter().take(n).map(|(_, it)| it).collect())
}
