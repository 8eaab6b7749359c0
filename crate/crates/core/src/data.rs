//! Dataset manifests, dense CSV ingestion, splitting, standardization and the
//! synthetic multi-domain generator.
//!
//! Data files carry one sample per line: an integer label followed by the
//! feature values, comma separated, no header.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, RngStream};

/// Samples of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: usize,
    pub name: String,
    pub classes: usize,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        domain: usize,
        name: impl Into<String>,
        classes: usize,
        features: Matrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::validation(format!(
                "domain {domain} declares {classes} classes; need at least 2"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {classes} classes in domain {domain}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                context: format!("features of domain {domain}"),
            });
        }
        Ok(Self {
            domain,
            name: name.into(),
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            domain: self.domain,
            name: self.name.clone(),
            classes: self.classes,
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    pub file: PathBuf,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub domains: Vec<DomainEntry>,
    /// Directory that relative `file` entries resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
    if manifest.domains.is_empty() {
        return Err(Error::validation(format!("{}: manifest lists no domains", path.display())));
    }
    if manifest.dim == 0 {
        return Err(Error::validation(format!("{}: dim must be >= 1", path.display())));
    }
    for d in &manifest.domains {
        if d.classes < 2 {
            return Err(Error::validation(format!(
                "{}: domain {} declares {} classes; need at least 2",
                path.display(),
                d.name,
                d.classes
            )));
        }
    }
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

pub fn load_domain(manifest: &DatasetManifest, k: usize) -> Result<DomainDataset> {
    let entry = manifest.domains.get(k).ok_or_else(|| {
        Error::validation(format!(
            "domain {k} not in manifest with {} domains",
            manifest.domains.len()
        ))
    })?;
    let path = manifest.base_dir.join(&entry.file);
    let (features, labels) = read_csv(&path, Some(manifest.dim), entry.classes)?;
    DomainDataset::new(k, entry.name.clone(), entry.classes, features, labels)
}

pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<DomainDataset>> {
    (0..manifest.domains.len())
        .map(|k| load_domain(manifest, k))
        .collect()
}

/// Parses a label-first CSV. `dim` pins the feature count when given.
pub fn read_csv(path: &Path, dim: Option<usize>, classes: usize) -> Result<(Matrix, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = dim;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or_default().trim();
        let label: usize = label_field
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {label_field:?} is not a non-negative integer")))?;
        if label >= classes {
            return Err(parse_err(
                line_no,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        let start = data.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("feature {f:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite feature {f:?}")));
            }
            data.push(v);
        }
        let got = data.len() - start;
        match width {
            Some(w) if w != got => {
                return Err(parse_err(
                    line_no,
                    format!("row has {got} features but the declared dim is {w}"),
                ));
            }
            None => width = Some(got),
            _ => {}
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(0, "file contains no samples".into()));
    }
    let cols = width.unwrap_or(0);
    Ok((Matrix::from_vec(labels.len(), cols, data)?, labels))
}

/// Writes a label-first CSV. Values use the shortest round-trip decimal form.
pub fn write_csv(path: &Path, features: &Matrix, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    for (row, label) in features.iter_rows().zip(labels) {
        write!(out, "{label}").expect("string write");
        for v in row {
            write!(out, ",{v:?}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_synth_name")]
    pub name: String,
    pub domains: usize,
    pub samples_per_domain: usize,
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub shared_strength: f64,
    pub shift_strength: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_synth_name() -> String {
    "synthetic".into()
}

fn default_classes() -> usize {
    2
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.domains == 0 {
            problems.push("domains must be >= 1".to_string());
        }
        if self.samples_per_domain == 0 {
            problems.push("samples_per_domain must be >= 1".into());
        }
        if self.dim == 0 {
            problems.push("dim must be >= 1".into());
        }
        if self.classes < 2 {
            problems.push("classes must be >= 2".into());
        }
        if !self.shared_strength.is_finite() || self.shared_strength < 0.0 {
            problems.push("shared_strength must be a finite value >= 0".into());
        }
        if !self.shift_strength.is_finite() || self.shift_strength < 0.0 {
            problems.push("shift_strength must be a finite value >= 0".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            problems.push("label_noise must lie in [0, 0.5)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

/// Draws a multi-domain classification problem.
///
/// For two classes with `y ∈ {-1, +1}` a sample of domain `k` is
/// `x = y·(shared·w + shift·w_k) + ε`, `ε ~ N(0, I)`, where `w` is a unit
/// direction common to all domains and `w_k` a unit direction private to `k`.
/// With more classes every class gets its own shared and per-domain direction.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, "synthetic");
    let binary = spec.classes == 2;
    let class_dirs = if binary { 1 } else { spec.classes };

    let shared: Vec<Vec<f64>> = (0..class_dirs)
        .map(|_| unit_vector(spec.dim, &mut rng))
        .collect();
    let private: Vec<Vec<Vec<f64>>> = (0..spec.domains)
        .map(|_| {
            (0..class_dirs)
                .map(|_| unit_vector(spec.dim, &mut rng))
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(spec.domains);
    for (k, private_k) in private.iter().enumerate() {
        let mut drng = rng.derive(&format!("domain{k}"));
        let mut features = Matrix::zeros(spec.samples_per_domain, spec.dim);
        let mut labels = Vec::with_capacity(spec.samples_per_domain);
        for i in 0..spec.samples_per_domain {
            let y = drng.below(spec.classes);
            let row = features.row_mut(i);
            let (dir, sign) = if binary {
                (0, if y == 1 { 1.0 } else { -1.0 })
            } else {
                (y, 1.0)
            };
            for (j, v) in row.iter_mut().enumerate() {
                let mean = sign
                    * (spec.shared_strength * shared[dir][j]
                        + spec.shift_strength * private_k[dir][j]);
                *v = mean + drng.standard_normal();
            }
            let mut label = y;
            if spec.label_noise > 0.0 && drng.uniform() < spec.label_noise {
                let other = drng.below(spec.classes - 1);
                label = if other >= y { other + 1 } else { other };
            }
            labels.push(label);
        }
        out.push(DomainDataset::new(
            k,
            format!("{}-{k}", spec.name),
            spec.classes,
            features,
            labels,
        )?);
    }
    Ok(out)
}

fn unit_vector(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let n = crate::nn::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class-stratified split; each class contributes `round(test_fraction·n_c)`
/// samples to the test side, at least one to each side.
pub fn train_test_split(
    data: &DomainDataset,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::validation(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..data.classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::validation(format!(
                "class {c} of domain {} has {} sample(s); stratified split needs at least 2",
                data.domain,
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n_test = ((test_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((data.subset(&train_idx), data.subset(&test_idx)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    const STD_FLOOR: f64 = 1e-8;

    pub fn fit(features: &Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::validation("cannot standardize with an empty training set"));
        }
        let n = features.rows() as f64;
        let d = features.cols();
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Standardizes every domain with statistics pooled over all training domains.
pub fn standardize(
    train: &[DomainDataset],
    test: &[DomainDataset],
) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>, Standardization)> {
    let mut stacked = train
        .first()
        .ok_or_else(|| Error::validation("no training domains"))?
        .features
        .clone();
    for d in &train[1..] {
        stacked = stacked.vconcat(&d.features)?;
    }
    let stats = Standardization::fit(&stacked)?;
    let map = |ds: &[DomainDataset]| {
        ds.iter()
            .map(|d| DomainDataset {
                features: stats.apply(&d.features),
                ..d.clone()
            })
            .collect::<Vec<_>>()
    };
    let tr = map(train);
    let te = map(test);
    Ok((tr, te, stats))
}
