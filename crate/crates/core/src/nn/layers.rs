//! Hand-written reverse-mode layer primitives.

use super::matrix::Matrix;
use super::rng::RngStream;
use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Affine layer `y = x·Wᵀ + b`, `W` shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

/// Saved input of a [`Linear`] forward pass.
#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Matrix,
    out_dim: usize,
}

impl LinearCache {
    pub fn input(&self) -> &Matrix {
        &self.input
    }
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.as_mut_slice() {
            *v = (2.0 * rng.uniform() - 1.0) * limit;
        }
        Self::from_parts(w, Matrix::zeros(1, out_dim)).expect("shapes built consistently")
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape("linear bias", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.rows()
    }

    /// Inference-only forward.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("linear_forward", x.shape(), self.weight.value.shape()));
        }
        let mut y = x.matmul_transposed(&self.weight.value)?;
        let b = self.bias.value.row(0);
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    /// Single-vector forward.
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(
                "linear_forward",
                (1, x.len()),
                self.weight.value.shape(),
            ));
        }
        let w = &self.weight.value;
        Ok((0..self.out_dim())
            .map(|o| super::matrix::dot(w.row(o), x) + self.bias.value.get(0, o))
            .collect())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        let y = self.apply(x)?;
        Ok((
            y,
            LinearCache {
                input: x.clone(),
                out_dim: self.out_dim(),
            },
        ))
    }

    /// Accumulates `dW += dYᵀ·X`, `db += colsum(dY)` and returns `dX = dY·W`.
    pub fn backward(&mut self, cache: &LinearCache, dy: &Matrix) -> Result<Matrix> {
        if cache.out_dim != self.out_dim() || cache.input.cols() != self.in_dim() {
            return Err(Error::Usage(format!(
                "linear backward with a cache from a different layer ({}->{} vs {}->{})",
                cache.input.cols(),
                cache.out_dim,
                self.in_dim(),
                self.out_dim()
            )));
        }
        if dy.shape() != (cache.input.rows(), self.out_dim()) {
            return Err(Error::shape(
                "linear_backward",
                dy.shape(),
                (cache.input.rows(), self.out_dim()),
            ));
        }
        let dw = dy.transposed_matmul(&cache.input)?;
        self.weight.grad.add_assign(&dw)?;
        let db = self.bias.grad.row_mut(0);
        for r in 0..dy.rows() {
            for (g, v) in db.iter_mut().zip(dy.row(r)) {
                *g += v;
            }
        }
        dy.matmul(&self.weight.value)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// `dX = dY` where the forward input was strictly positive, else 0.
pub fn relu_backward(input: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if input.shape() != dy.shape() {
        return Err(Error::shape("relu_backward", input.shape(), dy.shape()));
    }
    let data = input
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(input.rows(), input.cols(), data)
}

/// Gradient reversal: identity forward, `-λ·dY` backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReversal {
    lambda: f64,
}

impl GradReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::validation(format!(
                "gradient reversal weight must be >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn backward(&self, dy: &Matrix) -> Matrix {
        // 0·(-1) would give -0.0; keep the blocked gradient a clean zero.
        if self.lambda == 0.0 {
            return Matrix::zeros(dy.rows(), dy.cols());
        }
        dy.scale(-self.lambda)
    }
}

/// Row-wise max-shifted softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// `(probs - onehot) / batch`
    pub dlogits: Matrix,
    pub probs: Matrix,
}

pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    if labels.len() != logits.rows() {
        return Err(Error::validation(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::validation("cross entropy over an empty batch"));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let probs = softmax_rows(logits);
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        // log p_y computed from the shifted logits keeps tiny probabilities accurate.
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = dlogits.row_mut(r);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross-entropy loss".into(),
        });
    }
    Ok(CrossEntropy {
        loss,
        dlogits,
        probs,
    })
}

/// Plain SGD update over every parameter; zeroes gradients afterwards.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves the parameters untouched.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Param>,
{
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::validation(format!("learning rate must be > 0, got {lr}")));
    }
    let mut params: Vec<&mut Param> = params.into_iter().collect();
    for (i, p) in params.iter().enumerate() {
        if p.grad.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", p.value.shape(), p.grad.shape()));
        }
        if let Some(pos) = p.grad.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "gradient of parameter {i} (shape {:?}) at entry {pos}: {}",
                    p.value.shape(),
                    p.grad.as_slice()[pos]
                ),
            });
        }
    }
    for p in params.iter_mut() {
        let Param { value, grad } = &mut **p;
        for (v, g) in value.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v -= lr * g;
        }
        grad.fill(0.0);
    }
    Ok(())
}

const KL_FLOOR: f64 = 1e-12;

/// `D_KL(P ‖ Q) = Σ P(x)·ln(P(x)/Q(x))`.
///
/// Both distributions are clamped at 1e-12 inside the logarithm; the weight is
/// the unclamped `P(x)`. Tiny negative round-off is clipped to 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::validation(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    validate_distribution(p, "P")?;
    validate_distribution(q, "Q")?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (pi.max(KL_FLOOR) / qi.max(KL_FLOOR)).ln()
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

fn validate_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::validation(format!("{name} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}
