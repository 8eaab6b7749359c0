//! Adversarial shared-private multi-domain classifier.
//!
//! Every domain `k` is classified by `C_k(F_s(x) ⊕ F_p_k(x))`, where `F_s` is a
//! one-hidden-layer ReLU extractor shared by all domains and `F_p_k` a private
//! one. A linear discriminator reads `F_s(x)` through a gradient-reversal layer
//! and tries to recover the domain id, which pushes `F_s` toward
//! domain-invariant features.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::{
    dot, relu, relu_backward, sgd_step, softmax, softmax_cross_entropy, GradReversal, Linear,
    Matrix, Param, RngStream,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub shared_hidden: usize,
    pub private_hidden: usize,
    /// Class count of each domain; its length is the number of domains.
    pub num_classes: Vec<usize>,
    pub lambda_adv: f64,
    pub lambda_diff: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
}

impl ModelConfig {
    pub fn num_domains(&self) -> usize {
        self.num_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes.is_empty() {
            problems.push("at least one domain is required".to_string());
        }
        if self.num_classes.iter().any(|&c| c < 2) {
            problems.push("every domain needs at least 2 classes".into());
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("shared_hidden", self.shared_hidden),
            ("private_hidden", self.private_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_diff", self.lambda_diff)] {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("{name} must be a finite value >= 0"));
            }
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            problems.push("lr must be a finite value > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspMtlModel {
    config: ModelConfig,
    shared: Linear,
    private: Vec<Linear>,
    classifiers: Vec<Linear>,
    discriminator: Linear,
}

/// Last-layer gradient of the pseudo-labelled cross-entropy, flattened
/// row-major as `classes × dim(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEmbedding {
    pub classes: usize,
    pub values: Vec<f64>,
}

/// Batched intermediate outputs for one domain.
#[derive(Debug, Clone)]
pub struct DomainOutputs {
    pub shared: Matrix,
    pub private: Matrix,
    pub probs: Matrix,
}

impl DomainOutputs {
    /// `h = shared ⊕ private` of row `i`.
    pub fn penultimate(&self, i: usize) -> Vec<f64> {
        let mut h = self.shared.row(i).to_vec();
        h.extend_from_slice(self.private.row(i));
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_domain: Vec<f64>,
    pub macro_accuracy: f64,
}

/// One optimization step's inputs: a supervised batch from a single domain and
/// a domain-labelled batch drawn from all pools.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub task_domain: usize,
    pub task_x: Matrix,
    pub task_y: Vec<usize>,
    pub adv_x: Matrix,
    pub adv_domains: Vec<usize>,
}

/// Unweighted loss terms of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub task: f64,
    pub adversarial: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Per-epoch mean of each loss term.
    pub epochs: Vec<LossTerms>,
    pub steps: usize,
}

/// Labeled samples of one domain.
#[derive(Debug, Clone, Copy)]
pub struct LabeledView<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub rows: &'a [usize],
}

impl AspMtlModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let shared = Linear::init(config.input_dim, config.shared_hidden, rng);
        let private = (0..config.num_domains())
            .map(|_| Linear::init(config.input_dim, config.private_hidden, rng))
            .collect();
        let head_in = config.shared_hidden + config.private_hidden;
        let classifiers = config
            .num_classes
            .iter()
            .map(|&c| Linear::init(head_in, c, rng))
            .collect();
        let discriminator = Linear::init(config.shared_hidden, config.num_domains(), rng);
        Ok(Self {
            config,
            shared,
            private,
            classifiers,
            discriminator,
        })
    }

    /// Assembles a model from explicit layers.
    pub fn from_layers(
        config: ModelConfig,
        shared: Linear,
        private: Vec<Linear>,
        classifiers: Vec<Linear>,
        discriminator: Linear,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.num_domains();
        let head_in = config.shared_hidden + config.private_hidden;
        let ok = shared.in_dim() == config.input_dim
            && shared.out_dim() == config.shared_hidden
            && private.len() == k
            && private
                .iter()
                .all(|p| p.in_dim() == config.input_dim && p.out_dim() == config.private_hidden)
            && classifiers.len() == k
            && classifiers
                .iter()
                .zip(&config.num_classes)
                .all(|(c, &n)| c.in_dim() == head_in && c.out_dim() == n)
            && discriminator.in_dim() == config.shared_hidden
            && discriminator.out_dim() == k;
        if !ok {
            return Err(Error::validation("layer shapes do not match the model config"));
        }
        Ok(Self {
            config,
            shared,
            private,
            classifiers,
            discriminator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains()
    }

    pub fn shared_dim(&self) -> usize {
        self.config.shared_hidden
    }

    pub fn private_dim(&self) -> usize {
        self.config.private_hidden
    }

    pub fn classifier(&self, k: usize) -> &Linear {
        &self.classifiers[k]
    }

    pub fn classifier_mut(&mut self, k: usize) -> &mut Linear {
        &mut self.classifiers[k]
    }

    pub fn shared_extractor(&self) -> &Linear {
        &self.shared
    }

    pub fn private_extractor(&self, k: usize) -> &Linear {
        &self.private[k]
    }

    pub fn discriminator(&self) -> &Linear {
        &self.discriminator
    }

    fn check_domain(&self, k: usize) -> Result<()> {
        if k >= self.num_domains() {
            return Err(Error::validation(format!(
                "domain id {k} out of range for {} domains",
                self.num_domains()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::shape(
                "model input",
                (1, x.len()),
                (1, self.config.input_dim),
            ));
        }
        Ok(())
    }

    /// `(F_s(x), F_p_k(x))`
    pub fn features(&self, x: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_domain(k)?;
        self.check_input(x)?;
        let mut hs = self.shared.apply_vec(x)?;
        let mut hp = self.private[k].apply_vec(x)?;
        hs.iter_mut().chain(hp.iter_mut()).for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
        Ok((hs, hp))
    }

    /// `softmax(C_k(shared ⊕ private))`
    pub fn classify_features(&self, shared: &[f64], private: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_domain(k)?;
        if shared.len() != self.shared_dim() || private.len() != self.private_dim() {
            return Err(Error::shape(
                "classifier input",
                (shared.len(), private.len()),
                (self.shared_dim(), self.private_dim()),
            ));
        }
        let c = &self.classifiers[k];
        let w = &c.weight.value;
        let split = self.shared_dim();
        let logits: Vec<f64> = (0..c.out_dim())
            .map(|o| {
                let row = w.row(o);
                dot(&row[..split], shared) + dot(&row[split..], private) + c.bias.value.get(0, o)
            })
            .collect();
        Ok(softmax(&logits))
    }

    pub fn forward(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let (hs, hp) = self.features(x, k)?;
        self.classify_features(&hs, &hp, k)
    }

    /// Output distribution with `delta` added to the shared feature only.
    pub fn forward_perturbed(&self, x: &[f64], k: usize, delta: &[f64]) -> Result<Vec<f64>> {
        if delta.len() != self.shared_dim() {
            return Err(Error::validation(format!(
                "perturbation has dimension {} but the shared feature has {}",
                delta.len(),
                self.shared_dim()
            )));
        }
        let (mut hs, hp) = self.features(x, k)?;
        for (h, d) in hs.iter_mut().zip(delta) {
            *h += d;
        }
        self.classify_features(&hs, &hp, k)
    }

    pub fn penultimate_features(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let (mut hs, hp) = self.features(x, k)?;
        hs.extend(hp);
        Ok(hs)
    }

    /// Batched shared/private features and class probabilities for domain `k`.
    pub fn domain_outputs(&self, x: &Matrix, k: usize) -> Result<DomainOutputs> {
        self.check_domain(k)?;
        if x.cols() != self.config.input_dim {
            return Err(Error::shape("model input", x.shape(), (x.rows(), self.config.input_dim)));
        }
        let shared = relu(&self.shared.apply(x)?);
        let private = relu(&self.private[k].apply(x)?);
        let mut probs = Matrix::zeros(x.rows(), self.config.num_classes[k]);
        for r in 0..x.rows() {
            let p = self.classify_features(shared.row(r), private.row(r), k)?;
            probs.row_mut(r).copy_from_slice(&p);
        }
        Ok(DomainOutputs {
            shared,
            private,
            probs,
        })
    }

    pub fn predict_proba_batch(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        Ok(self.domain_outputs(x, k)?.probs)
    }

    pub fn gradient_embedding(&self, x: &[f64], k: usize) -> Result<GradientEmbedding> {
        let (hs, hp) = self.features(x, k)?;
        let p = self.classify_features(&hs, &hp, k)?;
        let mut h = hs;
        h.extend(hp);
        Ok(GradientEmbedding {
            classes: p.len(),
            values: pseudo_label_gradient(&p, &h),
        })
    }

    /// Gradient embeddings of every row, one per output row.
    pub fn gradient_embeddings(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        let out = self.domain_outputs(x, k)?;
        let dim = out.probs.cols() * (self.shared_dim() + self.private_dim());
        let mut emb = Matrix::zeros(x.rows(), dim);
        for r in 0..x.rows() {
            let g = pseudo_label_gradient(out.probs.row(r), &out.penultimate(r));
            emb.row_mut(r).copy_from_slice(&g);
        }
        Ok(emb)
    }

    pub fn evaluate(&self, test_sets: &[DomainDataset]) -> Result<Evaluation> {
        if test_sets.len() != self.num_domains() {
            return Err(Error::validation(format!(
                "{} test sets for {} domains",
                test_sets.len(),
                self.num_domains()
            )));
        }
        let mut per_domain = Vec::with_capacity(test_sets.len());
        for (k, ds) in test_sets.iter().enumerate() {
            if ds.is_empty() {
                return Err(Error::validation(format!("test set of domain {k} is empty")));
            }
            let probs = self.predict_proba_batch(&ds.features, k)?;
            let correct = (0..ds.len())
                .filter(|&i| argmax(probs.row(i)) == ds.labels[i])
                .count();
            per_domain.push(correct as f64 / ds.len() as f64);
        }
        let macro_accuracy = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
        Ok(Evaluation {
            per_domain,
            macro_accuracy,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.shared.params().into_iter().collect();
        for l in self.private.iter().chain(&self.classifiers) {
            out.extend(l.params());
        }
        out.extend(self.discriminator.params());
        out
    }

    /// Parameters in a fixed order: shared, private 0..K, classifiers 0..K,
    /// discriminator; weight before bias.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.shared.params_mut().into_iter().collect();
        for l in self.private.iter_mut().chain(self.classifiers.iter_mut()) {
            out.extend(l.params_mut());
        }
        out.extend(self.discriminator.params_mut());
        out
    }

    /// Number of leading entries of [`Self::params_mut`] owned by the shared extractor.
    pub const SHARED_PARAM_COUNT: usize = 2;

    /// Index range of the discriminator in [`Self::params_mut`].
    pub fn discriminator_param_range(&self) -> std::ops::Range<usize> {
        let start = 2 + 4 * self.num_domains();
        start..start + 2
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_batch(&self, batch: &TrainingBatch) -> Result<()> {
        self.check_domain(batch.task_domain)?;
        if batch.task_x.rows() == 0 || batch.task_x.rows() != batch.task_y.len() {
            return Err(Error::validation("task batch is empty or mislabelled"));
        }
        if batch.adv_x.rows() != batch.adv_domains.len() {
            return Err(Error::validation("adversarial batch size mismatch"));
        }
        Ok(())
    }

    /// Forward-only loss terms of a batch.
    pub fn loss_terms(&self, batch: &TrainingBatch) -> Result<LossTerms> {
        self.check_batch(batch)?;
        let k = batch.task_domain;
        let hs = relu(&self.shared.apply(&batch.task_x)?);
        let hp = relu(&self.private[k].apply(&batch.task_x)?);
        let logits = self.classifiers[k].apply(&hs.hconcat(&hp)?)?;
        let task = softmax_cross_entropy(&logits, &batch.task_y)?.loss;
        let diff = hs.transposed_matmul(&hp)?.frobenius_sq();
        let adversarial = if batch.adv_x.rows() > 0 {
            let a = relu(&self.shared.apply(&batch.adv_x)?);
            softmax_cross_entropy(&self.discriminator.apply(&a)?, &batch.adv_domains)?.loss
        } else {
            0.0
        };
        Ok(LossTerms {
            task,
            adversarial,
            diff,
        })
    }

    /// Forward and backward over one batch, accumulating into the parameter
    /// gradients.
    ///
    /// Classifier, private and discriminator gradients descend
    /// `task + λ_adv·adversarial + λ_diff·diff`; the shared extractor receives
    /// the adversarial part through gradient reversal and so descends
    /// `task − λ_adv·adversarial + λ_diff·diff`.
    pub fn accumulate_gradients(&mut self, batch: &TrainingBatch) -> Result<LossTerms> {
        self.check_batch(batch)?;
        let k = batch.task_domain;
        let lambda_adv = self.config.lambda_adv;
        let lambda_diff = self.config.lambda_diff;

        let (zs, shared_cache) = self.shared.forward(&batch.task_x)?;
        let (zp, private_cache) = self.private[k].forward(&batch.task_x)?;
        let hs = relu(&zs);
        let hp = relu(&zp);
        let h = hs.hconcat(&hp)?;
        let (logits, head_cache) = self.classifiers[k].forward(&h)?;
        let ce = softmax_cross_entropy(&logits, &batch.task_y)?;
        let dh = self.classifiers[k].backward(&head_cache, &ce.dlogits)?;
        let (mut dhs, mut dhp) = dh.hsplit(self.shared_dim());

        let cross = hs.transposed_matmul(&hp)?;
        let diff = cross.frobenius_sq();
        if lambda_diff > 0.0 {
            // d‖HsᵀHp‖² = 2·Hp·Mᵀ for Hs and 2·Hs·M for Hp, M = HsᵀHp
            dhs.add_assign(&hp.matmul_transposed(&cross)?.scale(2.0 * lambda_diff))?;
            dhp.add_assign(&hs.matmul(&cross)?.scale(2.0 * lambda_diff))?;
        }
        let dzs = relu_backward(&zs, &dhs)?;
        let dzp = relu_backward(&zp, &dhp)?;
        self.shared.backward(&shared_cache, &dzs)?;
        self.private[k].backward(&private_cache, &dzp)?;

        let mut adversarial = 0.0;
        if batch.adv_x.rows() > 0 {
            let (za, adv_cache) = self.shared.forward(&batch.adv_x)?;
            let a = relu(&za);
            let grl = GradReversal::new(1.0)?;
            let (dlogits_in, disc_cache) = self.discriminator.forward(&grl.forward(&a))?;
            let dce = softmax_cross_entropy(&dlogits_in, &batch.adv_domains)?;
            adversarial = dce.loss;
            let da = self
                .discriminator
                .backward(&disc_cache, &dce.dlogits.scale(lambda_adv))?;
            let dza = relu_backward(&za, &grl.backward(&da))?;
            self.shared.backward(&adv_cache, &dza)?;
        }

        let terms = LossTerms {
            task: ce.loss,
            adversarial,
            diff,
        };
        if !(terms.task.is_finite() && terms.adversarial.is_finite() && terms.diff.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("training loss {terms:?}"),
            });
        }
        Ok(terms)
    }

    /// Trains for `epochs_per_round` epochs on the labeled rows of every
    /// domain, with adversarial batches drawn uniformly from all pool rows.
    ///
    /// An epoch is `ceil(total_labeled / batch_size)` steps; the task domain of
    /// each step rotates round-robin over domains.
    pub fn train_round(
        &mut self,
        labeled: &[LabeledView<'_>],
        pools: &[&Matrix],
        rng: &mut RngStream,
    ) -> Result<TrainingLog> {
        let k_domains = self.num_domains();
        if labeled.len() != k_domains || pools.len() != k_domains {
            return Err(Error::validation(format!(
                "expected {k_domains} labeled sets and pools, got {} and {}",
                labeled.len(),
                pools.len()
            )));
        }
        for (k, view) in labeled.iter().enumerate() {
            if view.rows.is_empty() {
                return Err(Error::validation(format!("domain {k} has no labeled samples")));
            }
            if pools[k].rows() == 0 {
                return Err(Error::validation(format!("pool of domain {k} is empty")));
            }
        }
        let batch_size = self.config.batch_size;
        let total_labeled: usize = labeled.iter().map(|v| v.rows.len()).sum();
        let steps_per_epoch = total_labeled.div_ceil(batch_size).max(1);
        let pool_offsets: Vec<usize> = pools
            .iter()
            .scan(0, |acc, p| {
                let start = *acc;
                *acc += p.rows();
                Some(start)
            })
            .collect();
        let pool_total: usize = pools.iter().map(|p| p.rows()).sum();

        let mut cursors: Vec<Cursor> = labeled.iter().map(|v| Cursor::new(v.rows)).collect();
        let mut log = TrainingLog::default();
        let mut step = 0usize;
        self.zero_grad();
        for epoch in 0..self.config.epochs_per_round {
            let mut sum = LossTerms::default();
            for _ in 0..steps_per_epoch {
                let k = step % k_domains;
                let view = &labeled[k];
                let take = batch_size.min(view.rows.len());
                let rows = cursors[k].next_batch(take, rng);
                let task_x = view.features.select_rows(&rows);
                let task_y = rows.iter().map(|&r| view.labels[r]).collect();

                let mut adv_domains = Vec::with_capacity(batch_size);
                let mut adv_x = Matrix::zeros(batch_size, self.config.input_dim);
                for i in 0..batch_size {
                    let flat = rng.below(pool_total);
                    let d = pool_offsets.partition_point(|&o| o <= flat) - 1;
                    adv_domains.push(d);
                    adv_x.row_mut(i).copy_from_slice(pools[d].row(flat - pool_offsets[d]));
                }

                let batch = TrainingBatch {
                    task_domain: k,
                    task_x,
                    task_y,
                    adv_x,
                    adv_domains,
                };
                let terms = self.accumulate_gradients(&batch).map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("epoch {epoch} step {step}: {context}"),
                    },
                    other => other,
                })?;
                let lr = self.config.lr;
                sgd_step(self.params_mut(), lr).map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("epoch {epoch} step {step}: {context}"),
                    },
                    other => other,
                })?;
                sum.task += terms.task;
                sum.adversarial += terms.adversarial;
                sum.diff += terms.diff;
                step += 1;
            }
            let n = steps_per_epoch as f64;
            log.epochs.push(LossTerms {
                task: sum.task / n,
                adversarial: sum.adversarial / n,
                diff: sum.diff / n,
            });
        }
        log.steps = step;
        Ok(log)
    }

    /// Writes every parameter matrix, bit-exact, after a config line.
    ///
    /// ```text
    /// mdalbench-checkpoint 1
    /// config <json>
    /// matrix <name> <rows> <cols>
    /// <rows lines of space-separated 16-digit hex f64 bit patterns>
    /// ```
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        writeln!(w, "mdalbench-checkpoint 1").map_err(io)?;
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        writeln!(w, "config {cfg}").map_err(io)?;
        for (name, p) in self.named_params() {
            let m = &p.value;
            writeln!(w, "matrix {name} {} {}", m.rows(), m.cols()).map_err(io)?;
            for row in m.iter_rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: "<checkpoint>".into(),
            line,
            message,
        };
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(bad(i + 1, e.to_string())),
                None => Err(bad(0, "unexpected end of checkpoint".into())),
            }
        };
        let (n, header) = next()?;
        if header.trim() != "mdalbench-checkpoint 1" {
            return Err(bad(n, format!("unknown header {header:?}")));
        }
        let (n, cfg_line) = next()?;
        let cfg_json = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad(n, "expected config line".into()))?;
        let config: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| bad(n, e.to_string()))?;
        let mut model = AspMtlModel::new(config, &mut RngStream::new(0, "checkpoint"))?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut params = model.params_mut();
        for (name, param) in names.iter().zip(params.iter_mut()) {
            let (n, head) = next()?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let expected = param.value.shape();
            if parts.len() != 4 || parts[0] != "matrix" || parts[1] != name {
                return Err(bad(n, format!("expected matrix header for {name}, got {head:?}")));
            }
            let shape: (usize, usize) = (
                parts[2].parse().map_err(|_| bad(n, "bad row count".into()))?,
                parts[3].parse().map_err(|_| bad(n, "bad column count".into()))?,
            );
            if shape != expected {
                return Err(bad(
                    n,
                    format!("{name} has shape {shape:?}, config implies {expected:?}"),
                ));
            }
            for r in 0..shape.0 {
                let (n, row) = next()?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| u64::from_str_radix(t, 16).map(f64::from_bits))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(n, e.to_string()))?;
                if vals.len() != shape.1 {
                    return Err(bad(n, format!("expected {} values, got {}", shape.1, vals.len())));
                }
                param.value.row_mut(r).copy_from_slice(&vals);
            }
        }
        drop(params);
        Ok(model)
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("shared.weight".to_string(), &self.shared.weight),
            ("shared.bias".to_string(), &self.shared.bias),
        ];
        for (k, l) in self.private.iter().enumerate() {
            out.push((format!("private{k}.weight"), &l.weight));
            out.push((format!("private{k}.bias"), &l.bias));
        }
        for (k, l) in self.classifiers.iter().enumerate() {
            out.push((format!("classifier{k}.weight"), &l.weight));
            out.push((format!("classifier{k}.bias"), &l.bias));
        }
        out.push(("discriminator.weight".into(), &self.discriminator.weight));
        out.push(("discriminator.bias".into(), &self.discriminator.bias));
        out
    }
}

/// `(p − onehot(argmax p)) ⊗ h`, row-major over classes.
pub fn pseudo_label_gradient(p: &[f64], h: &[f64]) -> Vec<f64> {
    let y = argmax(p);
    let mut out = Vec::with_capacity(p.len() * h.len());
    for (c, &pc) in p.iter().enumerate() {
        let r = if c == y { pc - 1.0 } else { pc };
        out.extend(h.iter().map(|&hj| r * hj));
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Walks a shuffled copy of a domain's labeled rows, reshuffling when exhausted.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(rows: &[usize]) -> Self {
        Self {
            order: rows.to_vec(),
            pos: rows.len(),
        }
    }

    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
