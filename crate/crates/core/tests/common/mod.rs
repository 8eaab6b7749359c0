//! Test-side oracles and fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use mdalbench::data::DomainDataset;
use mdalbench::engine::{DatasetSource, ExperimentConfig, TrainingParams};
use mdalbench::model::{AspMtlModel, ModelConfig, TrainingBatch};
use mdalbench::nn::{Matrix, RngStream};
use mdalbench::pool::{ItemRef, PoolState, QueryBatch};
use mdalbench::strategies::{coreset_select, SelectionContext, StrategyParams};
use mdalbench::data::SyntheticSpec;

pub fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_probs(n: usize, rng: &mut RngStream) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn model_config(
    input_dim: usize,
    shared: usize,
    private: usize,
    num_classes: Vec<usize>,
    lambda_adv: f64,
    lambda_diff: f64,
) -> ModelConfig {
    ModelConfig {
        input_dim,
        shared_hidden: shared,
        private_hidden: private,
        num_classes,
        lambda_adv,
        lambda_diff,
        lr: 0.05,
        batch_size: 4,
        epochs_per_round: 10,
    }
}

/// A model with every dimension drawn from `1..=max_dim` and 1–3 domains.
pub fn random_model(rng: &mut RngStream, max_dim: usize) -> AspMtlModel {
    let k = 1 + rng.below(3);
    let classes = (0..k).map(|_| 2 + rng.below(3)).collect();
    let cfg = model_config(
        1 + rng.below(max_dim),
        1 + rng.below(max_dim),
        1 + rng.below(max_dim),
        classes,
        uniform(rng, 0.0, 1.0),
        0.0,
    );
    AspMtlModel::new(cfg, rng).unwrap()
}

/// Scalar objective each parameter group descends: the shared extractor
/// sees the adversarial term with flipped sign.
pub fn objective(model: &AspMtlModel, batch: &TrainingBatch, shared_param: bool) -> f64 {
    let t = model.loss_terms(batch).unwrap();
    let cfg = model.config();
    let sign = if shared_param { -1.0 } else { 1.0 };
    t.task + sign * cfg.lambda_adv * t.adversarial + cfg.lambda_diff * t.diff
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so vanishing gradients compare
/// absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central finite differences over every parameter entry against
/// `accumulate_gradients`.
pub fn fd_check_model(model: &AspMtlModel, batch: &TrainingBatch, h: f64) -> FdReport {
    let mut analytic = model.clone();
    analytic.zero_grad();
    analytic.accumulate_gradients(batch).unwrap();
    let grads: Vec<Matrix> = analytic.params().iter().map(|p| p.grad.clone()).collect();

    let mut probe = model.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (pi, grad) in grads.iter().enumerate() {
        let shared = pi < AspMtlModel::SHARED_PARAM_COUNT;
        for e in 0..grad.as_slice().len() {
            let orig = probe.params()[pi].value.as_slice()[e];
            probe.params_mut()[pi].value.as_mut_slice()[e] = orig + h;
            let up = objective(&probe, batch, shared);
            probe.params_mut()[pi].value.as_mut_slice()[e] = orig - h;
            let down = objective(&probe, batch, shared);
            probe.params_mut()[pi].value.as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(grad.as_slice()[e], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    report
}

pub fn random_batch(model: &AspMtlModel, rng: &mut RngStream) -> TrainingBatch {
    let cfg = model.config();
    let k = rng.below(cfg.num_domains());
    let n = 1 + rng.below(5);
    let m = rng.below(6);
    TrainingBatch {
        task_domain: k,
        task_x: random_matrix(n, cfg.input_dim, 1.0, rng),
        task_y: (0..n).map(|_| rng.below(cfg.num_classes[k])).collect(),
        adv_x: random_matrix(m, cfg.input_dim, 1.0, rng),
        adv_domains: (0..m).map(|_| rng.below(cfg.num_domains())).collect(),
    }
}

/// Largest-remainder apportionment written as repeated arg-max picks over
/// exact rational remainders.
pub fn largest_remainder_reference(n: &[usize], budget: usize) -> Vec<usize> {
    let total: u128 = n.iter().map(|&v| v as u128).sum();
    let b = budget as u128;
    let mut out: Vec<usize> = n.iter().map(|&v| (b * v as u128 / total) as usize).collect();
    let mut rem: Vec<Option<u128>> = n.iter().map(|&v| Some(b * v as u128 % total)).collect();
    let mut leftover = budget - out.iter().sum::<usize>();
    while leftover > 0 {
        let mut best: Option<usize> = None;
        for (k, r) in rem.iter().enumerate() {
            if let Some(r) = r {
                if best.is_none_or(|j| *r > rem[j].unwrap()) {
                    best = Some(k);
                }
            }
        }
        let k = best.unwrap();
        out[k] += 1;
        rem[k] = None;
        leftover -= 1;
    }
    out
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first from scratch: every step recomputes each candidate's
/// distance to the current centers.
pub fn brute_farthest_first(
    candidates: &[(ItemRef, Vec<f64>)],
    labeled: &[Vec<f64>],
    b: usize,
) -> Vec<ItemRef> {
    let mut centers: Vec<Vec<f64>> = labeled.to_vec();
    let mut chosen: Vec<ItemRef> = Vec::new();
    for _ in 0..b {
        let mut best: Option<(f64, ItemRef, Vec<f64>)> = None;
        for (item, f) in candidates {
            if chosen.contains(item) {
                continue;
            }
            let d = centers
                .iter()
                .map(|c| sq_dist(f, c))
                .fold(f64::INFINITY, f64::min);
            let better = match &best {
                None => true,
                Some((bd, bi, _)) => d > *bd || (d == *bd && item < bi),
            };
            if better {
                best = Some((d, *item, f.clone()));
            }
        }
        let (_, item, f) = best.unwrap();
        chosen.push(item);
        centers.push(f);
    }
    chosen.sort();
    chosen
}

/// Minimum SSE over every partition of the points into `k` nonempty groups.
pub fn exhaustive_min_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut used = vec![false; k];
        for &l in &labels {
            used[l] = true;
        }
        if used.iter().all(|&u| u) {
            let mut sse = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                sse += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
            }
            best = best.min(sse);
        }
        // next assignment in base k
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

pub fn dataset(domain: usize, features: Matrix, labels: Vec<usize>, classes: usize) -> Arc<DomainDataset> {
    Arc::new(DomainDataset::new(domain, format!("d{domain}"), classes, features, labels).unwrap())
}

/// Random pool over `sizes[k]` items per domain with `labeled[k]` of them
/// labeled.
pub fn random_pool(
    model: &AspMtlModel,
    sizes: &[usize],
    labeled: &[usize],
    rng: &mut RngStream,
) -> PoolState {
    let cfg = model.config();
    let datasets = sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let x = random_matrix(n, cfg.input_dim, 1.0, rng);
            let y = (0..n).map(|_| rng.below(cfg.num_classes[k])).collect();
            dataset(k, x, y, cfg.num_classes[k])
        })
        .collect();
    let mut pool = PoolState::new(datasets).unwrap();
    let mut items = Vec::new();
    for (k, (&n, &l)) in sizes.iter().zip(labeled).enumerate() {
        let all: Vec<usize> = (0..n).collect();
        items.extend(rng.choose_multiple(&all, l).into_iter().map(|i| ItemRef::new(k, i)));
    }
    pool.annotate(&QueryBatch::new(items)).unwrap();
    pool
}

/// The desk-scale synthetic task used for the end-to-end criteria.
pub fn desk_scale_config(strategies: &[&str], seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            name: "synthetic".into(),
            domains: 3,
            samples_per_domain: 400,
            dim: 20,
            classes: 2,
            shared_strength: 1.0,
            shift_strength: 1.0,
            label_noise: 0.0,
            seed: 7,
        }),
        test_fraction: 0.25,
        standardize: None,
        strategies: strategies.iter().map(|s| s.to_string()).collect(),
        strategy_params: StrategyParams::default(),
        init_fraction: 0.10,
        step_fraction: 0.05,
        budget_fraction: 0.50,
        seeds,
        model: TrainingParams::default(),
    }
}

/// Blob instances: up to 8 points around `k ≤ 3` centers drawn with spread 4,
/// clustered with the generating `k` under 5 seeds each. Returns
/// `(runs at the exhaustive minimum, runs)`.
pub fn kmeans_optimum_rate(seed: u64, instances: usize) -> (usize, usize) {
    let mut rng = RngStream::new(seed, "kmeans-blobs");
    let (mut optimal, mut runs) = (0, 0);
    for _ in 0..instances {
        let n = 2 + rng.below(7);
        let dim = 1 + rng.below(3);
        let k = 1 + rng.below(3.min(n));
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| 4.0 * rng.standard_normal()).collect())
            .collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..dim).map(|j| centers[i % k][j] + rng.standard_normal()).collect())
            .collect();
        let m = Matrix::from_rows(&points).unwrap();
        let best = exhaustive_min_sse(&points, k);
        for s in 0..5 {
            let r = mdalbench::strategies::kmeans(&m, k, &mut RngStream::new(s, "km")).unwrap();
            assert!(r.sse() >= best - 1e-9);
            runs += 1;
            if r.sse() <= best * (1.0 + 1e-9) + 1e-12 {
                optimal += 1;
            }
        }
    }
    (optimal, runs)
}

/// A small two-domain model trained on every row of a synthetic problem.
pub fn trained_toy_model(seed: u64) -> (AspMtlModel, Vec<DomainDataset>) {
    use mdalbench::model::LabeledView;
    let spec = SyntheticSpec {
        name: "toy".into(),
        domains: 2,
        samples_per_domain: 80,
        dim: 5,
        classes: 2,
        shared_strength: 1.5,
        shift_strength: 1.0,
        label_noise: 0.0,
        seed,
    };
    let data = mdalbench::data::generate_synthetic(&spec).unwrap();
    let mut cfg = model_config(5, 16, 16, vec![2, 2], 0.05, 0.0);
    cfg.epochs_per_round = 20;
    cfg.batch_size = 8;
    cfg.lr = 0.05;
    let mut model = AspMtlModel::new(cfg, &mut RngStream::new(seed, "toy-init")).unwrap();
    let rows: Vec<Vec<usize>> = data.iter().map(|d| (0..d.len()).collect()).collect();
    let views: Vec<LabeledView<'_>> = data
        .iter()
        .zip(&rows)
        .map(|(d, r)| LabeledView {
            features: &d.features,
            labels: &d.labels,
            rows: r,
        })
        .collect();
    let pools: Vec<&Matrix> = data.iter().map(|d| &d.features).collect();
    model
        .train_round(&views, &pools, &mut RngStream::new(seed, "toy-train"))
        .unwrap();
    (model, data)
}

/// Mean perturbation score over every row, each row on its own stream.
pub fn mean_score(model: &AspMtlModel, data: &[DomainDataset], sigma: f64, samples: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for d in data {
        for (i, x) in d.features.iter_rows().enumerate() {
            let mut rng = RngStream::new(0, format!("score/{}/{i}", d.domain));
            total += mdalbench::strategies::perturbation_score(model, x, d.domain, sigma, samples, &mut rng)
                .unwrap();
            n += 1;
        }
    }
    total / n as f64
}

/// Classifier weight gradient of the cross-entropy at label `y`, by running
/// the layer's own backward pass on a single row.
pub fn backprop_weight_grad(
    model: &AspMtlModel,
    x: &[f64],
    k: usize,
    y: usize,
) -> Vec<f64> {
    let h = Matrix::row_vector(&model.penultimate_features(x, k).unwrap()).unwrap();
    let mut head = model.classifier(k).clone();
    let (logits, cache) = head.forward(&h).unwrap();
    let ce = mdalbench::nn::softmax_cross_entropy(&logits, &[y]).unwrap();
    head.backward(&cache, &ce.dlogits).unwrap();
    head.weight.grad.as_slice().to_vec()
}

/// A random pool of at most 20 items with a nonempty labeled set. Returns
/// `(coreset_select, brute-force farthest-first)`.
pub fn coreset_case(rng: &mut RngStream) -> (Vec<ItemRef>, Vec<ItemRef>) {
    let model = random_model(rng, 6);
    let k_domains = model.num_domains();
    let total = 3 + rng.below(18);
    let mut sizes = vec![1; k_domains];
    for _ in k_domains..total.max(k_domains + 1) {
        sizes[rng.below(k_domains)] += 1;
    }
    let n: usize = sizes.iter().sum();
    let labeled_total = 1 + rng.below(n - 1);
    let mut labeled = vec![0; k_domains];
    let mut left = labeled_total;
    while left > 0 {
        let d = rng.below(k_domains);
        if labeled[d] < sizes[d] {
            labeled[d] += 1;
            left -= 1;
        }
    }
    let pool = random_pool(&model, &sizes, &labeled, rng);
    let b = 1 + rng.below(pool.unlabeled_total());

    let feats = |item: ItemRef| -> Vec<f64> {
        let x = pool.domain(item.domain).data.features.row(item.index);
        model.penultimate_features(x, item.domain).unwrap()
    };
    let candidates: Vec<(ItemRef, Vec<f64>)> =
        pool.unlabeled_items().into_iter().map(|i| (i, feats(i))).collect();
    let labeled_feats: Vec<Vec<f64>> = pool.labeled_items().into_iter().map(feats).collect();
    let expected = brute_farthest_first(&candidates, &labeled_feats, b);

    let ctx = SelectionContext::new(
        &model,
        &pool,
        b,
        RngStream::new(0, "select"),
        StrategyParams::default(),
    );
    (coreset_select(&ctx).unwrap().items, expected)
}
