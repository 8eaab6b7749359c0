//! Two-stage selection: per-domain regions in gradient space, then one
//! winner per region.

use rayon::prelude::*;

use super::baselines::{egl_score, margin};
use super::kmeans::{kmeans, KMeansResult};
use super::{RegionScorer, SelectionContext};
use crate::error::{Error, Result};
use crate::model::AspMtlModel;
use crate::nn::{gaussian_sample, kl_divergence, squared_distance, Matrix, RngStream};
use crate::pool::{ItemRef, QueryBatch};

/// Regions of one domain.
#[derive(Debug, Clone)]
pub struct DomainRegions {
    pub domain: usize,
    /// Unlabeled sample indices that were clustered, ascending.
    pub candidates: Vec<usize>,
    /// Gradient embedding of each candidate, row-aligned with `candidates`.
    pub embeddings: Matrix,
    pub clustering: KMeansResult,
}

impl DomainRegions {
    /// Sample indices of each region.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        self.clustering
            .clusters()
            .into_iter()
            .map(|c| c.into_iter().map(|p| self.candidates[p]).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RegionPartition {
    /// Only domains with a nonzero budget appear.
    pub domains: Vec<DomainRegions>,
}

/// Clusters the unlabeled gradient embeddings of every domain `k` into
/// `budgets[k]` regions.
pub fn build_regions(ctx: &SelectionContext<'_>, budgets: &[usize]) -> Result<RegionPartition> {
    if budgets.len() != ctx.pool.num_domains() {
        return Err(Error::validation(format!(
            "{} budgets for {} domains",
            budgets.len(),
            ctx.pool.num_domains()
        )));
    }
    let rng = ctx.rng.derive("regions");
    let mut domains = Vec::new();
    for (k, &bk) in budgets.iter().enumerate() {
        if bk == 0 {
            continue;
        }
        let candidates: Vec<usize> = ctx.pool.domain(k).unlabeled().iter().copied().collect();
        let embeddings = ctx
            .model
            .gradient_embeddings(&ctx.features_of(k, &candidates), k)?;
        let clustering = kmeans(&embeddings, bk, &mut rng.derive(&format!("domain{k}")))?;
        domains.push(DomainRegions {
            domain: k,
            candidates,
            embeddings,
            clustering,
        });
    }
    Ok(RegionPartition { domains })
}

/// Mean KL divergence between the clean prediction and predictions with
/// `N(0, σ²I)` noise added to the shared feature, over `samples` fresh draws.
pub fn perturbation_score(
    model: &AspMtlModel,
    x: &[f64],
    k: usize,
    sigma: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let (hs, hp) = model.features(x, k)?;
    perturbation_score_from_features(model, &hs, &hp, k, sigma, samples, rng)
}

/// [`perturbation_score`] with the extractor outputs already computed.
pub fn perturbation_score_from_features(
    model: &AspMtlModel,
    shared: &[f64],
    private: &[f64],
    k: usize,
    sigma: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::validation("perturbation samples must be >= 1"));
    }
    let clean = model.classify_features(shared, private, k)?;
    let mut noisy = shared.to_vec();
    let mut total = 0.0;
    for _ in 0..samples {
        let delta = gaussian_sample(sigma, shared.len(), rng)?;
        for ((n, s), d) in noisy.iter_mut().zip(shared).zip(&delta) {
            *n = s + d;
        }
        let q = model.classify_features(&noisy, private, k)?;
        total += kl_divergence(&clean, &q)?;
    }
    Ok(total / samples as f64)
}

/// Budget split, gradient-space regions, and the most perturbation-sensitive
/// item of every region.
pub fn p2s_select(ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    two_stage_variant_select(ctx, RegionScorer::Perturbation, true)
}

/// The two-stage pipeline with a configurable second-stage scorer. Without
/// the region stage, each domain contributes its top `B_k` items by score.
pub fn two_stage_variant_select(
    ctx: &SelectionContext<'_>,
    scorer: RegionScorer,
    regions: bool,
) -> Result<QueryBatch> {
    ctx.validate()?;
    let budgets = ctx.domain_budgets()?;
    let mut picked = Vec::with_capacity(ctx.budget);
    if regions {
        let partition = build_regions(ctx, &budgets)?;
        for dr in &partition.domains {
            let utility = domain_utilities(ctx, dr.domain, &dr.candidates, scorer, || {
                Ok(center_distances(&dr.embeddings, &dr.clustering))
            })?;
            for members in dr.clustering.clusters() {
                let best = members
                    .iter()
                    .copied()
                    .reduce(|a, b| {
                        // members ascend by sample index, so keep `a` on ties
                        if utility[b] > utility[a] {
                            b
                        } else {
                            a
                        }
                    })
                    .expect("repaired clusters are never empty");
                picked.push(ItemRef::new(dr.domain, dr.candidates[best]));
            }
        }
    } else {
        for (k, &bk) in budgets.iter().enumerate() {
            if bk == 0 {
                continue;
            }
            let candidates: Vec<usize> = ctx.pool.domain(k).unlabeled().iter().copied().collect();
            let utility = domain_utilities(ctx, k, &candidates, scorer, || {
                let emb = ctx
                    .model
                    .gradient_embeddings(&ctx.features_of(k, &candidates), k)?;
                Ok(mean_distances(&emb))
            })?;
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| utility[b].total_cmp(&utility[a]).then(a.cmp(&b)));
            picked.extend(order[..bk].iter().map(|&p| ItemRef::new(k, candidates[p])));
        }
    }
    Ok(QueryBatch::new(picked))
}

/// Higher-is-better utility of each candidate. `center_dist` supplies the
/// squared centroid distances for the center scorer.
fn domain_utilities<F>(
    ctx: &SelectionContext<'_>,
    k: usize,
    candidates: &[usize],
    scorer: RegionScorer,
    center_dist: F,
) -> Result<Vec<f64>>
where
    F: FnOnce() -> Result<Vec<f64>>,
{
    if scorer == RegionScorer::Center {
        return Ok(center_dist()?.into_iter().map(|d| -d).collect());
    }
    let outputs = ctx.model.domain_outputs(&ctx.features_of(k, candidates), k)?;
    match scorer {
        RegionScorer::Bvsb => Ok((0..candidates.len())
            .map(|r| -margin(outputs.probs.row(r)))
            .collect()),
        RegionScorer::Egl => Ok((0..candidates.len())
            .map(|r| egl_score(outputs.probs.row(r), &outputs.penultimate(r)))
            .collect()),
        RegionScorer::Perturbation => {
            let base = ctx.rng.derive("perturbation");
            candidates
                .par_iter()
                .enumerate()
                .map(|(r, &idx)| {
                    let mut rng = base.derive(&format!("domain{k}/item{idx}"));
                    perturbation_score_from_features(
                        ctx.model,
                        outputs.shared.row(r),
                        outputs.private.row(r),
                        k,
                        ctx.params.sigma,
                        ctx.params.samples,
                        &mut rng,
                    )
                })
                .collect()
        }
        RegionScorer::Center => unreachable!(),
    }
}

fn center_distances(embeddings: &Matrix, clustering: &KMeansResult) -> Vec<f64> {
    embeddings
        .iter_rows()
        .zip(&clustering.assignments)
        .map(|(e, &c)| squared_distance(e, clustering.centers.row(c)))
        .collect()
}

fn mean_distances(embeddings: &Matrix) -> Vec<f64> {
    let n = embeddings.rows() as f64;
    let mut mean = vec![0.0; embeddings.cols()];
    for row in embeddings.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    embeddings
        .iter_rows()
        .map(|e| squared_distance(e, &mean))
        .collect()
}
