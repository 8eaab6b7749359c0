use mdalbench::data::{generate_synthetic, DomainDataset, SyntheticSpec};
use mdalbench::nn::dot;

fn spec(seed: u64, shift: f64) -> SyntheticSpec {
    SyntheticSpec {
        name: "synthetic".into(),
        domains: 3,
        samples_per_domain: 400,
        dim: 20,
        classes: 2,
        shared_strength: 1.0,
        shift_strength: shift,
        label_noise: 0.0,
        seed,
    }
}

/// Leading eigenpair of a symmetric matrix by power iteration.
fn top_eigen(m: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = m.len();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 1e-3).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = m.iter().map(|row| dot(row, &v)).collect();
        lambda = dot(&w, &w).sqrt();
        v = w.into_iter().map(|x| x / lambda).collect();
    }
    (lambda, v)
}

/// Zero-mean Gaussian per domain with covariance `I + v vᵀ`, `v` from the
/// leading direction of the domain's second-moment matrix on the first half
/// of its rows. Returns held-out accuracy of the maximum-likelihood domain.
fn quadratic_domain_accuracy(domains: &[DomainDataset]) -> f64 {
    let models: Vec<(f64, Vec<f64>)> = domains
        .iter()
        .map(|d| {
            let half = d.len() / 2;
            let dim = d.dim();
            let mut s = vec![vec![0.0; dim]; dim];
            for r in 0..half {
                let x = d.features.row(r);
                for i in 0..dim {
                    for j in 0..dim {
                        s[i][j] += x[i] * x[j] / half as f64;
                    }
                }
            }
            let (lambda, u) = top_eigen(&s);
            let scale = (lambda - 1.0).max(0.0);
            (scale, u)
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for d in domains {
        for r in d.len() / 2..d.len() {
            let x = d.features.row(r);
            let xx = dot(x, x);
            let ll: Vec<f64> = models
                .iter()
                .map(|(a, u)| {
                    let proj = dot(u, x);
                    // Sherman–Morrison with v = √a·u
                    -0.5 * (1.0 + a).ln() - 0.5 * (xx - a * proj * proj / (1.0 + a))
                })
                .collect();
            let best = (0..ll.len()).fold(0, |b, k| if ll[k] > ll[b] { k } else { b });
            hits += usize::from(best == d.domain);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn shifted_domains_are_distinguishable_from_raw_features() {
    for seed in 0..5 {
        let acc = quadratic_domain_accuracy(&generate_synthetic(&spec(seed, 1.0)).unwrap());
        assert!(acc > 1.0 / 3.0 + 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn unshifted_domains_are_not() {
    let acc = quadratic_domain_accuracy(&generate_synthetic(&spec(0, 0.0)).unwrap());
    assert!(acc < 1.0 / 3.0 + 0.08, "{acc}");
}

#[test]
fn synthetic_shapes_and_balance() {
    let domains = generate_synthetic(&spec(1, 1.0)).unwrap();
    assert_eq!(domains.len(), 3);
    for d in &domains {
        assert_eq!((d.len(), d.dim()), (400, 20));
        let ones = d.labels.iter().filter(|&&y| y == 1).count();
        assert!((150..=250).contains(&ones), "{ones}");
    }
}

fn column_stats(d: &DomainDataset, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d.dim()];
    for &r in rows {
        for (m, x) in mean.iter_mut().zip(d.features.row(r)) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d.dim()];
    for &r in rows {
        for ((v, x), m) in var.iter_mut().zip(d.features.row(r)).zip(&mean) {
            *v += (x - m) * (x - m) / (n - 1.0);
        }
    }
    (mean, var)
}

#[test]
fn noiseless_strong_signal_is_linearly_separable() {
    let mut s = spec(4, 0.5);
    s.shared_strength = 4.0;
    let domains = generate_synthetic(&s).unwrap();
    for d in &domains {
        let half = d.len() / 2;
        let by_class = |c: usize| -> Vec<usize> { (0..half).filter(|&r| d.labels[r] == c).collect() };
        let (m0, _) = column_stats(d, &by_class(0));
        let (m1, _) = column_stats(d, &by_class(1));
        let w: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
        let mid: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| (a + b) / 2.0).collect();
        let bias = dot(&w, &mid);
        let hits = (half..d.len())
            .filter(|&r| usize::from(dot(&w, d.features.row(r)) > bias) == d.labels[r])
            .count();
        let acc = hits as f64 / (d.len() - half) as f64;
        assert!(acc > 0.99, "domain {}: {acc}", d.domain);
    }
}

#[test]
fn unshifted_domains_pass_a_two_sample_mean_test() {
    let domains = generate_synthetic(&spec(5, 0.0)).unwrap();
    let all: Vec<usize> = (0..400).collect();
    let stats: Vec<_> = domains.iter().map(|d| column_stats(d, &all)).collect();
    for a in 0..3 {
        for b in a + 1..3 {
            // Sum of squared per-coordinate z statistics is roughly chi-square with 20 dof.
            let chi2: f64 = (0..20)
                .map(|i| {
                    let diff = stats[a].0[i] - stats[b].0[i];
                    diff * diff / ((stats[a].1[i] + stats[b].1[i]) / 400.0)
                })
                .sum();
            assert!(chi2 < 45.3, "domains {a},{b}: {chi2}");
        }
    }
}
