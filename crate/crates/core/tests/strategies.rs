mod common;

use std::collections::BTreeMap;

use common::*;
use mdalbench::model::AspMtlModel;
use mdalbench::nn::{Linear, Matrix, RngStream};
use mdalbench::pool::{ItemRef, PoolState, QueryBatch};
use mdalbench::strategies::{
    badge_select, build_regions, bvsb_select, coreset_select, kmeans, p2s_select,
    perturbation_score, random_select, select, two_stage_variant_select, RegionScorer,
    SelectionContext, StrategyKind, StrategyParams,
};
use proptest::prelude::*;

fn ctx<'a>(model: &'a AspMtlModel, pool: &'a PoolState, b: usize, seed: u64) -> SelectionContext<'a> {
    SelectionContext::new(model, pool, b, RngStream::new(seed, "select"), StrategyParams::default())
}

fn all_kinds() -> Vec<StrategyKind> {
    StrategyKind::NAMES.iter().map(|n| n.parse().unwrap()).collect()
}

/// One input, one shared unit `h_s = relu(x)`, one private unit fixed at 0,
/// and a head with logits `(h_s, 0)`.
fn identity_feature_model() -> AspMtlModel {
    let cfg = model_config(1, 1, 1, vec![2], 0.05, 0.0);
    let m = |r: usize, c: usize, v: Vec<f64>| Matrix::from_vec(r, c, v).unwrap();
    AspMtlModel::from_layers(
        cfg,
        Linear::from_parts(m(1, 1, vec![1.0]), m(1, 1, vec![0.0])).unwrap(),
        vec![Linear::from_parts(m(1, 1, vec![0.0]), m(1, 1, vec![0.0])).unwrap()],
        vec![Linear::from_parts(m(2, 2, vec![1.0, 0.0, 0.0, 0.0]), m(1, 2, vec![0.0, 0.0])).unwrap()],
        Linear::from_parts(m(1, 1, vec![0.0]), m(1, 1, vec![0.0])).unwrap(),
    )
    .unwrap()
}

fn line_pool(xs: &[f64], labeled: &[usize]) -> PoolState {
    let x = Matrix::from_vec(xs.len(), 1, xs.to_vec()).unwrap();
    let mut pool = PoolState::new(vec![dataset(0, x, vec![0; xs.len()], 2)]).unwrap();
    let items = labeled.iter().map(|&i| ItemRef::new(0, i)).collect();
    pool.annotate(&QueryBatch::new(items)).unwrap();
    pool
}

#[test]
fn bvsb_picks_the_smaller_margin() {
    let model = identity_feature_model();
    let pool = line_pool(&[1.5f64.ln(), 9f64.ln()], &[]);
    let p0 = model.forward(&[1.5f64.ln()], 0).unwrap();
    assert!((p0[0] - 0.6).abs() < 1e-12);
    let batch = bvsb_select(&ctx(&model, &pool, 1, 0)).unwrap();
    assert_eq!(batch.items, vec![ItemRef::new(0, 0)]);
}

#[test]
fn coreset_line_example() {
    let model = identity_feature_model();
    let pool = line_pool(&[0.0, 1.0, 2.0, 10.0], &[0]);
    let batch = coreset_select(&ctx(&model, &pool, 2, 0)).unwrap();
    assert_eq!(batch.items, vec![ItemRef::new(0, 2), ItemRef::new(0, 3)]);
    let one = coreset_select(&ctx(&model, &pool, 1, 0)).unwrap();
    assert_eq!(one.items, vec![ItemRef::new(0, 3)]);
}

#[test]
fn coreset_needs_a_labeled_item() {
    let model = identity_feature_model();
    let pool = line_pool(&[0.0, 1.0], &[]);
    assert!(coreset_select(&ctx(&model, &pool, 1, 0)).is_err());
}

#[test]
fn full_budget_takes_everything_and_zero_budget_is_rejected() {
    let mut rng = RngStream::new(41, "exhaust");
    let model = random_model(&mut rng, 5);
    let sizes: Vec<usize> = (0..model.num_domains()).map(|_| 3 + rng.below(4)).collect();
    let labeled: Vec<usize> = sizes.iter().map(|_| 1).collect();
    let pool = random_pool(&model, &sizes, &labeled, &mut rng);
    let all = pool.unlabeled_items();
    for kind in all_kinds() {
        let batch = select(kind, &ctx(&model, &pool, all.len(), 1)).unwrap();
        assert_eq!(batch.items, all, "{kind}");
        assert!(select(kind, &ctx(&model, &pool, 0, 1)).is_err(), "{kind}");
        assert!(select(kind, &ctx(&model, &pool, all.len() + 1, 1)).is_err(), "{kind}");
    }
}

#[test]
fn build_regions_partitions_each_budgeted_domain() {
    let mut rng = RngStream::new(42, "regions");
    for _ in 0..20 {
        let model = random_model(&mut rng, 5);
        let sizes: Vec<usize> = (0..model.num_domains()).map(|_| 4 + rng.below(10)).collect();
        let labeled: Vec<usize> = sizes.iter().map(|&n| rng.below(n / 2)).collect();
        let pool = random_pool(&model, &sizes, &labeled, &mut rng);
        let b = 1 + rng.below(pool.unlabeled_total());
        let c = ctx(&model, &pool, b, 3);
        let budgets = c.domain_budgets().unwrap();
        let part = build_regions(&c, &budgets).unwrap();
        let budgeted: Vec<usize> = (0..budgets.len()).filter(|&k| budgets[k] > 0).collect();
        assert_eq!(part.domains.iter().map(|d| d.domain).collect::<Vec<_>>(), budgeted);
        for dr in &part.domains {
            let regions = dr.regions();
            assert_eq!(regions.len(), budgets[dr.domain]);
            let mut members: Vec<usize> = regions.iter().flatten().copied().collect();
            assert!(regions.iter().all(|r| !r.is_empty()));
            members.sort_unstable();
            let unlabeled: Vec<usize> = pool.domain(dr.domain).unlabeled().iter().copied().collect();
            assert_eq!(members, unlabeled);
        }
    }
}

fn item_score(c: &SelectionContext<'_>, item: ItemRef) -> f64 {
    let x = c.pool.domain(item.domain).data.features.row(item.index);
    let mut rng = c
        .rng
        .derive("perturbation")
        .derive(&format!("domain{}/item{}", item.domain, item.index));
    perturbation_score(c.model, x, item.domain, c.params.sigma, c.params.samples, &mut rng).unwrap()
}

#[test]
fn p2s_with_one_domain_and_unit_budget_is_the_score_argmax() {
    let mut rng = RngStream::new(43, "argmax");
    for _ in 0..10 {
        let cfg = model_config(4, 5, 3, vec![3], 0.05, 0.0);
        let model = AspMtlModel::new(cfg, &mut rng).unwrap();
        let pool = random_pool(&model, &[12], &[3], &mut rng);
        let c = ctx(&model, &pool, 1, 9);
        let best = pool
            .unlabeled_items()
            .into_iter()
            .map(|it| (item_score(&c, it), it))
            .fold(None::<(f64, ItemRef)>, |acc, (s, it)| match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, it)),
            })
            .unwrap()
            .1;
        assert_eq!(p2s_select(&c).unwrap().items, vec![best]);
    }
}

#[test]
fn p2s_matches_a_straight_line_pipeline() {
    let mut rng = RngStream::new(44, "pipeline");
    for trial in 0..10 {
        let cfg = model_config(3, 4, 2, vec![2, 3], 0.05, 0.0);
        let model = AspMtlModel::new(cfg, &mut rng).unwrap();
        let pool = random_pool(&model, &[6, 6], &[2, 2], &mut rng);
        let b = 2 + trial % 5;
        let c = ctx(&model, &pool, b, trial as u64);

        let unlabeled = pool.unlabeled_counts();
        let budgets = largest_remainder_reference(&unlabeled, b);
        let mut expected = Vec::new();
        for (k, &bk) in budgets.iter().enumerate() {
            if bk == 0 {
                continue;
            }
            let idx: Vec<usize> = pool.domain(k).unlabeled().iter().copied().collect();
            let rows: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    model
                        .gradient_embedding(pool.domain(k).data.features.row(i), k)
                        .unwrap()
                        .values
                })
                .collect();
            let emb = Matrix::from_rows(&rows).unwrap();
            let mut krng = c.rng.derive("regions").derive(&format!("domain{k}"));
            let clusters = kmeans(&emb, bk, &mut krng).unwrap().clusters();
            for members in clusters {
                let mut best: Option<(f64, usize)> = None;
                for p in members {
                    let s = item_score(&c, ItemRef::new(k, idx[p]));
                    if best.is_none_or(|(bs, _)| s > bs) {
                        best = Some((s, idx[p]));
                    }
                }
                expected.push(ItemRef::new(k, best.unwrap().1));
            }
        }
        expected.sort();
        assert_eq!(p2s_select(&c).unwrap().items, expected, "trial {trial}");
    }
}

#[test]
fn pipeline_collapses() {
    let mut rng = RngStream::new(45, "collapse");
    for _ in 0..10 {
        let cfg = model_config(4, 4, 4, vec![3], 0.05, 0.0);
        let model = AspMtlModel::new(cfg, &mut rng).unwrap();
        let pool = random_pool(&model, &[15], &[3], &mut rng);
        let c = ctx(&model, &pool, 4, 2);
        assert_eq!(
            two_stage_variant_select(&c, RegionScorer::Bvsb, false).unwrap(),
            bvsb_select(&c).unwrap()
        );
    }
    let model = random_model(&mut rng, 5);
    let sizes = vec![9; model.num_domains()];
    let pool = random_pool(&model, &sizes, &vec![2; sizes.len()], &mut rng);
    let c = ctx(&model, &pool, 5, 4);
    assert_eq!(
        two_stage_variant_select(&c, RegionScorer::Perturbation, true).unwrap(),
        p2s_select(&c).unwrap()
    );
}

/// Expected inclusion count over `trials` against the observed count.
fn within_3se(observed: usize, p: f64, trials: usize) -> bool {
    let mean = p * trials as f64;
    let se = (trials as f64 * p * (1.0 - p)).sqrt();
    (observed as f64 - mean).abs() <= 3.0 * se
}

#[test]
fn random_selection_is_uniform_within_each_domain() {
    let cfg = model_config(2, 2, 2, vec![2, 2], 0.05, 0.0);
    let mut rng = RngStream::new(46, "random-freq");
    let model = AspMtlModel::new(cfg, &mut rng).unwrap();
    // 4 and 8 unlabeled, b = 3: shares 1 and 2, inclusion 1/4 everywhere
    let pool = random_pool(&model, &[5, 9], &[1, 1], &mut rng);
    let trials = 10_000;
    let mut counts: BTreeMap<ItemRef, usize> = BTreeMap::new();
    for t in 0..trials {
        for it in random_select(&ctx(&model, &pool, 3, t as u64)).unwrap().items {
            *counts.entry(it).or_default() += 1;
        }
    }
    for it in pool.unlabeled_items() {
        let n = counts.get(&it).copied().unwrap_or(0);
        assert!(within_3se(n, 0.25, trials), "{it:?}: {n}");
    }
}

#[test]
fn badge_follows_d2_sampling() {
    let cfg = model_config(3, 3, 3, vec![3], 0.05, 0.0);
    let mut rng = RngStream::new(47, "badge-freq");
    let model = AspMtlModel::new(cfg, &mut rng).unwrap();
    let pool = random_pool(&model, &[4], &[0], &mut rng);
    let items = pool.unlabeled_items();
    let emb: Vec<Vec<f64>> = items
        .iter()
        .map(|it| {
            model
                .gradient_embedding(pool.domain(0).data.features.row(it.index), 0)
                .unwrap()
                .values
        })
        .collect();
    let n = items.len();
    // P({i, j}) = (1/n)·d²(i,j)/Σ_m d²(i,m) + (1/n)·d²(j,i)/Σ_m d²(j,m)
    let mut expected: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        let total: f64 = (0..n).map(|m| sq_dist(&emb[i], &emb[m])).sum();
        for j in 0..n {
            if i != j {
                let key = (i.min(j), i.max(j));
                *expected.entry(key).or_default() += sq_dist(&emb[i], &emb[j]) / total / n as f64;
            }
        }
    }
    let trials = 10_000;
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in 0..trials {
        let picked = badge_select(&ctx(&model, &pool, 2, t as u64)).unwrap().items;
        let key = (picked[0].index, picked[1].index);
        *counts.entry(key).or_default() += 1;
    }
    for (key, p) in expected {
        let got = counts.get(&key).copied().unwrap_or(0);
        assert!(within_3se(got, p, trials), "{key:?}: {got} vs {}", p * trials as f64);
    }
}

#[test]
fn strategies_are_deterministic_across_thread_counts() {
    let mut rng = RngStream::new(48, "determinism");
    let model = random_model(&mut rng, 6);
    let sizes = vec![20; model.num_domains()];
    let pool = random_pool(&model, &sizes, &vec![3; sizes.len()], &mut rng);
    let run = |threads: usize| {
        let tp = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        tp.install(|| {
            all_kinds()
                .into_iter()
                .map(|k| select(k, &ctx(&model, &pool, 7, 5)).unwrap())
                .collect::<Vec<_>>()
        })
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn every_strategy_returns_distinct_unlabeled_items(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "contexts");
        let model = random_model(&mut rng, 5);
        let sizes: Vec<usize> = (0..model.num_domains()).map(|_| 2 + rng.below(12)).collect();
        let labeled: Vec<usize> = sizes.iter().map(|&n| 1 + rng.below(n - 1)).collect();
        let pool = random_pool(&model, &sizes, &labeled, &mut rng);
        let b = 1 + rng.below(pool.unlabeled_total());
        for kind in all_kinds() {
            let batch = select(kind, &ctx(&model, &pool, b, seed)).unwrap();
            prop_assert_eq!(batch.len(), b);
            let mut seen = batch.items.clone();
            seen.dedup();
            prop_assert_eq!(seen.len(), b);
            for it in &batch.items {
                prop_assert!(pool.is_unlabeled(*it));
            }
            prop_assert_eq!(&select(kind, &ctx(&model, &pool, b, seed)).unwrap(), &batch);
        }
    }
}
