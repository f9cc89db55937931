//! Datasets: seeded synthetic blob worlds, jointly Gaussian oracle worlds,
//! and small CSV files.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::bounds::{JointGaussianSpec, NoiseModel};
use crate::error::{CemError, Result};
use crate::numerics::{seeded_rng, Covariance, Matrix};

/// Every `TEST_STRIDE`-th member of a class goes to the test split.
const TEST_STRIDE: usize = 5;

/// Distance of every class mean from the origin in the blob world.
const SIMPLEX_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Build a dataset, normalizing inputs to `[0, 1]` per column and
    /// drawing a stratified 80/20 split.
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(CemError::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(CemError::LabelOutOfRange { label, n_classes });
        }
        if !inputs.is_finite() {
            return Err(CemError::NonFinite("dataset inputs contain NaN or infinity".into()));
        }
        let (train, test) = stratified_split(&labels, n_classes);
        Ok(Self {
            inputs: normalize(&inputs),
            labels,
            n_classes,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn train_inputs(&self) -> Matrix {
        self.inputs.select_rows(&self.train)
    }

    pub fn test_inputs(&self) -> Matrix {
        self.inputs.select_rows(&self.test)
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|&i| self.labels[i]).collect()
    }

    /// CSV with a header row, label first, values at 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CemError::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut header = String::from("label");
        for t in 0..self.dim() {
            header.push_str(&format!(",x{t}"));
        }
        writeln!(out, "{header}").map_err(|e| CemError::io(path, e))?;
        for (row, label) in self.inputs.row_iter().zip(&self.labels) {
            let mut line = label.to_string();
            for v in row {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(out, "{line}").map_err(|e| CemError::io(path, e))?;
        }
        out.flush().map_err(|e| CemError::io(path, e))
    }
}

fn stratified_split(labels: &[usize], n_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut seen = vec![0usize; n_classes];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if seen[l] % TEST_STRIDE == TEST_STRIDE - 1 {
            test.push(i);
        } else {
            train.push(i);
        }
        seen[l] += 1;
    }
    (train, test)
}

/// Per-column min-max scaling to `[0, 1]`; constant columns map to 0.
pub fn normalize(inputs: &Matrix) -> Matrix {
    let (rows, cols) = inputs.shape();
    let mut out = inputs.clone();
    for t in 0..cols {
        let (lo, hi) = (0..rows).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(inputs[(i, t)]), hi.max(inputs[(i, t)]))
        });
        let span = hi - lo;
        for i in 0..rows {
            out[(i, t)] = if span > 0.0 {
                ((inputs[(i, t)] - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Gaussian blobs around the vertices of a simplex: class `c < d` sits at
/// `e_c`, class `d` (if any) at the origin.
pub fn synth_blobs(
    n_classes: usize,
    d: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || n_classes > d + 1 {
        return Err(CemError::DegenerateData(format!(
            "a {d}-dimensional simplex has no room for {n_classes} classes"
        )));
    }
    if per_class < 2 {
        return Err(CemError::DegenerateData("need at least two samples per class".into()));
    }
    let normal = Normal::new(0.0, spread.max(0.0))
        .map_err(|e| CemError::NonFinite(format!("spread {spread}: {e}")))?;
    let mut rng = seeded_rng(seed);
    let mut data = Vec::with_capacity(n_classes * per_class * d);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        for _ in 0..per_class {
            for t in 0..d {
                let center = if t == c { SIMPLEX_SCALE } else { 0.0 };
                data.push(center + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), d, data)?, labels, n_classes)
}

/// Read `label,v1,...,vd` rows. A first row whose label field is not an
/// integer is treated as a header.
pub fn load_csv(path: &Path, n_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CemError::io(path, io),
            other => CemError::Parse(format!("{}: {other:?}", path.display())),
        })?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record =
            record.map_err(|e| CemError::Parse(format!("{}:{line}: {e}", path.display())))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let label_field = record.get(0).unwrap_or("");
        let label: usize = match label_field.parse() {
            Ok(l) => l,
            Err(_) if idx == 0 => continue,
            Err(_) => {
                return Err(CemError::Parse(format!(
                    "{}:{line}: label `{label_field}` is not a non-negative integer",
                    path.display()
                )))
            }
        };
        let fields = record.len() - 1;
        match width {
            None => width = Some(fields),
            Some(w) if w != fields => {
                return Err(CemError::ShapeMismatch(format!(
                    "{}:{line}: {fields} values, expected {w}",
                    path.display()
                )))
            }
            _ => {}
        }
        if label >= n_classes {
            return Err(CemError::LabelOutOfRange { label, n_classes });
        }
        for f in record.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| {
                CemError::Parse(format!("{}:{line}: `{f}` is not a number", path.display()))
            })?;
            values.push(v);
        }
        labels.push(label);
    }
    let width = width.unwrap_or(0);
    if labels.is_empty() || width == 0 {
        return Err(CemError::Parse(format!("{}: no data rows", path.display())));
    }
    Dataset::new(Matrix::from_vec(labels.len(), width, values)?, labels, n_classes)
}

/// Draw `n` rows from `𝒩(0, cov)`.
pub fn sample_gaussian(cov: &Covariance, n: usize, seed: u64) -> Matrix {
    let l = cov.factor();
    let d = cov.dim();
    let mut rng = seeded_rng(seed);
    let mut out = Matrix::zeros(n, d);
    let mut xi = vec![0.0; d];
    for i in 0..n {
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = out.row_mut(i);
        for a in 0..d {
            row[a] = (0..=a).map(|b| l[(a, b)] * xi[b]).sum();
        }
    }
    out
}

/// Random jointly Gaussian world with `d_x, d_z ≤ max_d`.
///
/// With `isotropic_posterior` the world is `Σ_x = sI`, `W = w·Q` for an
/// orthogonal `Q` and `d_z = d_x`, so `Cov(x|z)` is a multiple of the
/// identity. Otherwise `Σ_x` and `W` are generic.
pub fn random_joint_gaussian(
    rng: &mut impl Rng,
    max_d: usize,
    isotropic_posterior: bool,
) -> Result<JointGaussianSpec> {
    let d_x = rng.random_range(1..=max_d);
    let noise = NoiseModel::isotropic(d_x, rng.random_range(0.05..1.0))?;
    if isotropic_posterior {
        let s = rng.random_range(0.2..2.0);
        let w = rng.random_range(0.3..2.0);
        let q = random_orthogonal(rng, d_x);
        return JointGaussianSpec::new(
            Covariance::isotropic(d_x, s, 0.0)?,
            q.scale(w),
            noise,
        );
    }
    let d_z = rng.random_range(1..=max_d);
    let a = Matrix::from_vec(
        d_x,
        d_x,
        (0..d_x * d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let mut sx = a.matmul_t(&a).scale(1.0 / d_x as f64);
    for i in 0..d_x {
        sx[(i, i)] += 0.1;
    }
    let scale = 1.0 / (d_x as f64).sqrt();
    let w = Matrix::from_vec(
        d_z,
        d_x,
        (0..d_z * d_x)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;
    JointGaussianSpec::new(Covariance::full_with_ridge(sx, 0.0)?, w, noise)
}

/// Product of `d` random Householder reflections.
fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Matrix {
    let mut q = Matrix::identity(d);
    for _ in 0..d {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        if norm2 < 1e-12 {
            continue;
        }
        let mut h = Matrix::identity(d);
        for a in 0..d {
            for b in 0..d {
                h[(a, b)] -= 2.0 * v[a] * v[b] / norm2;
            }
        }
        q = h.matmul(&q);
    }
    q
}
