//! k-Means++ seeding and Lloyd iterations.

use crate::error::{Error, Result};
use crate::nn::{squared_distance, Matrix, RngStream};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Picks `k` distinct rows: the first uniformly, each next one with
/// probability proportional to its squared distance to the nearest row
/// already picked. Once every remaining row coincides with a picked one, the
/// rest are drawn uniformly among the unpicked.
pub fn kmeanspp_seed(points: &Matrix, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::validation("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::validation(format!("k = {k} exceeds the {n} points")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.below(n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(first)))
        .collect();
    d2[first] = 0.0;

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                last_positive = i;
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        d2[next] = 0.0;
        let c = points.row(next);
        for (i, d) in d2.iter_mut().enumerate() {
            if !taken[i] {
                *d = d.min(squared_distance(points.row(i), c));
            }
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster of every point.
    pub assignments: Vec<usize>,
    pub centers: Matrix,
    /// SSE after each Lloyd iteration.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }

    /// Point indices of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

/// k-Means++ initialization followed by Lloyd iterations until the
/// assignment stops changing or [`MAX_LLOYD_ITERATIONS`] is reached. A
/// cluster that comes out empty takes the point farthest from its own center.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut RngStream) -> Result<KMeansResult> {
    let seeds = kmeanspp_seed(points, k, rng)?;
    let mut centers = points.select_rows(&seeds);
    let mut assignments = assign(points, &centers);
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    loop {
        repair_empty(points, &mut centers, &mut assignments);
        update_centers(points, &mut centers, &assignments);
        sse_history.push(sse(points, &centers, &assignments));
        iterations += 1;
        if iterations >= MAX_LLOYD_ITERATIONS {
            break;
        }
        let next = assign(points, &centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeansResult {
        assignments,
        centers,
        sse_history,
        iterations,
    })
}

/// Nearest center per point; ties go to the lower center index.
pub fn assign(points: &Matrix, centers: &Matrix) -> Vec<usize> {
    points
        .iter_rows()
        .map(|p| nearest(p, centers).0)
        .collect()
}

fn nearest(p: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter_rows().enumerate() {
        let d = squared_distance(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn sse(points: &Matrix, centers: &Matrix, assignments: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, centers.row(c)))
        .sum()
}

fn repair_empty(points: &Matrix, centers: &mut Matrix, assignments: &mut [usize]) {
    let k = centers.rows();
    let mut sizes = vec![0usize; k];
    for &c in assignments.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter_rows().enumerate() {
            let own = assignments[i];
            if sizes[own] < 2 {
                continue;
            }
            let d = squared_distance(p, centers.row(own));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else {
            // k > n; callers reject this before reaching here
            break;
        };
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] = 1;
        centers.row_mut(empty).copy_from_slice(points.row(i));
    }
}

fn update_centers(points: &Matrix, centers: &mut Matrix, assignments: &[usize]) {
    let dim = points.cols();
    let mut sums = Matrix::zeros(centers.rows(), dim);
    let mut counts = vec![0usize; centers.rows()];
    for (p, &c) in points.iter_rows().zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s * inv;
        }
    }
}
