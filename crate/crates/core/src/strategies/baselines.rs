//! Conventional single-domain acquisition strategies applied to the mixed pool.

use rayon::prelude::*;

use super::kmeans::kmeanspp_seed;
use super::{top_items, SelectionContext};
use crate::error::{Error, Result};
use crate::model::DomainOutputs;
use crate::nn::{norm, squared_distance, Matrix};
use crate::pool::{ItemRef, QueryBatch};

/// Uniform sampling without replacement inside each domain, after the
/// proportional budget split.
pub fn random_select(ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    ctx.validate()?;
    let budgets = ctx.domain_budgets()?;
    let rng = ctx.rng.derive("random");
    let mut items = Vec::with_capacity(ctx.budget);
    for (k, &bk) in budgets.iter().enumerate() {
        if bk == 0 {
            continue;
        }
        let candidates: Vec<usize> = ctx.pool.domain(k).unlabeled().iter().copied().collect();
        let mut drng = rng.derive(&format!("domain{k}"));
        items.extend(
            drng.choose_multiple(&candidates, bk)
                .into_iter()
                .map(|i| ItemRef::new(k, i)),
        );
    }
    Ok(QueryBatch::new(items))
}

/// Top-1 minus top-2 probability.
pub fn margin(p: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        return 1.0;
    }
    first - second
}

/// `Σ_c p_c · ‖p − e_c‖ · ‖h‖`: the expected norm of the last-layer
/// cross-entropy gradient over labels drawn from the model's own prediction.
pub fn egl_score(p: &[f64], h: &[f64]) -> f64 {
    let sq: f64 = p.iter().map(|v| v * v).sum();
    let h_norm = norm(h);
    p.iter()
        .map(|&pc| pc * (sq - 2.0 * pc + 1.0).max(0.0).sqrt())
        .sum::<f64>()
        * h_norm
}

fn score_all<F>(ctx: &SelectionContext<'_>, score: F) -> Result<Vec<(f64, ItemRef)>>
where
    F: Fn(&DomainOutputs, usize) -> f64,
{
    let mut out = Vec::with_capacity(ctx.pool.unlabeled_total());
    for k in 0..ctx.pool.num_domains() {
        let (idx, outputs) = ctx.unlabeled_outputs(k)?;
        for (r, &i) in idx.iter().enumerate() {
            out.push((score(&outputs, r), ItemRef::new(k, i)));
        }
    }
    Ok(out)
}

/// Smallest top-2 margin first.
pub fn bvsb_select(ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    ctx.validate()?;
    let scored = score_all(ctx, |o, r| -margin(o.probs.row(r)))?;
    Ok(top_items(scored, ctx.budget))
}

/// Largest expected gradient length first.
pub fn egl_select(ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    ctx.validate()?;
    let scored = score_all(ctx, |o, r| egl_score(o.probs.row(r), &o.penultimate(r)))?;
    Ok(top_items(scored, ctx.budget))
}

/// Greedy farthest-first traversal in penultimate-feature space, starting
/// from the labeled set.
pub fn coreset_select(ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    ctx.validate()?;
    let labeled = ctx.pool.labeled_items();
    if labeled.is_empty() {
        return Err(Error::validation("coreset selection needs at least one labeled item"));
    }
    let (items, feats) = penultimate_of(ctx, &ctx.pool.unlabeled_items())?;
    let (_, labeled_feats) = penultimate_of(ctx, &labeled)?;

    let mut min_d2: Vec<f64> = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let u = feats.row(i);
            labeled_feats
                .iter_rows()
                .map(|l| squared_distance(u, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; items.len()];
    let mut picked = Vec::with_capacity(ctx.budget);
    for _ in 0..ctx.budget {
        let mut best: Option<usize> = None;
        for i in 0..items.len() {
            if !taken[i] && best.is_none_or(|b| min_d2[i] > min_d2[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("budget never exceeds the unlabeled count");
        taken[b] = true;
        picked.push(items[b]);
        let c = feats.row(b).to_vec();
        for (i, d) in min_d2.iter_mut().enumerate() {
            if !taken[i] {
                *d = d.min(squared_distance(feats.row(i), &c));
            }
        }
    }
    Ok(QueryBatch::new(picked))
}

/// k-Means++ seeding over pseudo-label gradient embeddings of the whole
/// unlabeled pool; the `budget` seeds are the batch.
pub fn badge_select(ctx: &SelectionContext<'_>) -> Result<QueryBatch> {
    ctx.validate()?;
    let (items, emb) = embeddings_of(ctx)?;
    let mut rng = ctx.rng.derive("badge");
    let seeds = kmeanspp_seed(&emb, ctx.budget, &mut rng)?;
    Ok(QueryBatch::new(seeds.into_iter().map(|i| items[i]).collect()))
}

/// Penultimate features for `items` (sorted by domain), stacked in order.
fn penultimate_of(ctx: &SelectionContext<'_>, items: &[ItemRef]) -> Result<(Vec<ItemRef>, Matrix)> {
    let dim = ctx.model.shared_dim() + ctx.model.private_dim();
    let mut out = Matrix::zeros(items.len(), dim);
    let mut row = 0;
    for k in 0..ctx.pool.num_domains() {
        let idx: Vec<usize> = items
            .iter()
            .filter(|it| it.domain == k)
            .map(|it| it.index)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let o = ctx.model.domain_outputs(&ctx.features_of(k, &idx), k)?;
        for r in 0..idx.len() {
            out.row_mut(row).copy_from_slice(&o.penultimate(r));
            row += 1;
        }
    }
    debug_assert!(items.windows(2).all(|w| w[0] <= w[1]));
    Ok((items.to_vec(), out))
}

fn embeddings_of(ctx: &SelectionContext<'_>) -> Result<(Vec<ItemRef>, Matrix)> {
    let items = ctx.pool.unlabeled_items();
    let mut blocks = Vec::new();
    for k in 0..ctx.pool.num_domains() {
        let idx: Vec<usize> = ctx.pool.domain(k).unlabeled().iter().copied().collect();
        if idx.is_empty() {
            continue;
        }
        blocks.push(ctx.model.gradient_embeddings(&ctx.features_of(k, &idx), k)?);
    }
    if blocks.is_empty() {
        return Err(Error::validation("no unlabeled items"));
    }
    // Domains with fewer classes get zero gradient rows for the missing classes.
    let width = blocks.iter().map(Matrix::cols).max().unwrap_or(0);
    let mut emb = Matrix::zeros(items.len(), width);
    let mut row = 0;
    for b in &blocks {
        for r in b.iter_rows() {
            emb.row_mut(row)[..r.len()].copy_from_slice(r);
            row += 1;
        }
    }
    Ok((items, emb))
}
