//! Dense matrices, positive-definite covariances, Gaussian log-densities and
//! the Monte-Carlo entropy estimator used to check the closed-form bounds.
//!
//! Everything here is a pure function of its inputs. Randomized routines
//! take an explicit seed and build their own generator.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::NoiseModel;
use crate::error::{CemError, Result};
use crate::mixture::GaussianMixture;

/// Ridge added to a covariance diagonal before it is factorized.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `ln(2πe)`.
pub fn ln_2pi_e() -> f64 {
    (2.0 * PI * E).ln()
}

/// The generator every randomized routine in the crate is built on.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed (splitmix64 finalizer over the mix).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CemError::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(CemError::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, v) in diag.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`. Panics on mismatch.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`. Panics on mismatch.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul outer dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (oj, bkj) in o.iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_assign_scaled shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean_squared_error(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "mse shape");
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sum / self.data.len() as f64
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = a + ridge·I`.
pub fn cholesky(a: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CemError::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)] + ridge;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(CemError::NonPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solve `Lᵀ x = y` for lower-triangular `L`.
pub fn back_substitute(l: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `A X = B` column by column given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let mut x = Matrix::zeros(b.rows(), b.cols());
    let mut col = vec![0.0; b.rows()];
    for j in 0..b.cols() {
        for i in 0..b.rows() {
            col[i] = b[(i, j)];
        }
        let sol = back_substitute(l, &forward_substitute(l, &col));
        for i in 0..b.rows() {
            x[(i, j)] = sol[i];
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovRepr {
    Diagonal(Vec<f64>),
    /// The symmetric matrix together with its (ridged) Cholesky factor.
    Full { matrix: Matrix, factor: Matrix },
}

/// A symmetric positive-(semi)definite covariance matrix.
///
/// The ridge is added to the diagonal before any factorization or
/// log-determinant; `trace` reports the unridged matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    repr: CovRepr,
    ridge: f64,
}

impl Covariance {
    pub fn diagonal(entries: Vec<f64>) -> Result<Self> {
        Self::diagonal_with_ridge(entries, DEFAULT_RIDGE)
    }

    pub fn diagonal_with_ridge(entries: Vec<f64>, ridge: f64) -> Result<Self> {
        check_ridge(ridge)?;
        if let Some(t) = entries.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(CemError::NonPositiveDefinite {
                pivot: t,
                value: entries[t],
            });
        }
        if let Some(t) = entries.iter().position(|v| !(v + ridge > 0.0)) {
            return Err(CemError::NonPositiveDefinite {
                pivot: t,
                value: entries[t] + ridge,
            });
        }
        Ok(Self {
            repr: CovRepr::Diagonal(entries),
            ridge,
        })
    }

    /// `σ²·I` in `dim` dimensions.
    pub fn isotropic(dim: usize, variance: f64, ridge: f64) -> Result<Self> {
        Self::diagonal_with_ridge(vec![variance; dim], ridge)
    }

    pub fn full(matrix: Matrix) -> Result<Self> {
        Self::full_with_ridge(matrix, DEFAULT_RIDGE)
    }

    pub fn full_with_ridge(matrix: Matrix, ridge: f64) -> Result<Self> {
        check_ridge(ridge)?;
        let n = matrix.rows();
        if matrix.cols() != n {
            return Err(CemError::ShapeMismatch(format!(
                "covariance must be square, got {}x{}",
                n,
                matrix.cols()
            )));
        }
        let scale = matrix.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                    return Err(CemError::ShapeMismatch(format!(
                        "covariance is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let factor = cholesky(&matrix, ridge)?;
        Ok(Self {
            repr: CovRepr::Full { matrix, factor },
            ridge,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            CovRepr::Diagonal(d) => d.len(),
            CovRepr::Full { matrix, .. } => matrix.rows(),
        }
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn repr(&self) -> &CovRepr {
        &self.repr
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, CovRepr::Diagonal(_))
    }

    /// Diagonal entries of the unridged matrix.
    pub fn diag(&self) -> Vec<f64> {
        match &self.repr {
            CovRepr::Diagonal(d) => d.clone(),
            CovRepr::Full { matrix, .. } => matrix.diagonal(),
        }
    }

    /// The unridged matrix in dense form.
    pub fn to_matrix(&self) -> Matrix {
        match &self.repr {
            CovRepr::Diagonal(d) => Matrix::from_diag(d),
            CovRepr::Full { matrix, .. } => matrix.clone(),
        }
    }

    /// Lower Cholesky factor of the ridged matrix.
    pub fn factor(&self) -> Matrix {
        match &self.repr {
            CovRepr::Diagonal(d) => {
                Matrix::from_diag(&d.iter().map(|v| (v + self.ridge).sqrt()).collect::<Vec<_>>())
            }
            CovRepr::Full { factor, .. } => factor.clone(),
        }
    }

    /// `self + v·I`. A strictly positive `v` makes the sum definite on its
    /// own, so the ridge is dropped; `v == 0` keeps it.
    pub fn with_added_variance(&self, v: f64) -> Result<Self> {
        let ridge = if v > 0.0 { 0.0 } else { self.ridge };
        match &self.repr {
            CovRepr::Diagonal(d) => {
                Self::diagonal_with_ridge(d.iter().map(|e| e + v).collect(), ridge)
            }
            CovRepr::Full { matrix, .. } => {
                let mut m = matrix.clone();
                for i in 0..m.rows() {
                    m[(i, i)] += v;
                }
                Self::full_with_ridge(m, ridge)
            }
        }
    }

    /// Log-determinant in nats.
    pub fn logdet(&self) -> Result<f64> {
        match &self.repr {
            CovRepr::Diagonal(d) => Ok(d.iter().map(|v| (v + self.ridge).ln()).sum()),
            CovRepr::Full { factor, .. } => {
                Ok(2.0 * (0..factor.rows()).map(|i| factor[(i, i)].ln()).sum::<f64>())
            }
        }
    }

    pub fn trace(&self) -> f64 {
        match &self.repr {
            CovRepr::Diagonal(d) => d.iter().sum(),
            CovRepr::Full { matrix, .. } => matrix.trace(),
        }
    }

    /// Squared Mahalanobis norm `rᵀ (Σ + ridge·I)⁻¹ r`.
    pub fn mahalanobis_sq(&self, r: &[f64]) -> f64 {
        match &self.repr {
            CovRepr::Diagonal(d) => r
                .iter()
                .zip(d)
                .map(|(ri, v)| ri * ri / (v + self.ridge))
                .sum(),
            CovRepr::Full { factor, .. } => {
                let y = forward_substitute(factor, r);
                dot(&y, &y)
            }
        }
    }

    /// `(Σ + ridge·I)⁻¹ r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        match &self.repr {
            CovRepr::Diagonal(d) => r.iter().zip(d).map(|(ri, v)| ri / (v + self.ridge)).collect(),
            CovRepr::Full { factor, .. } => back_substitute(factor, &forward_substitute(factor, r)),
        }
    }
}

fn check_ridge(ridge: f64) -> Result<()> {
    if ridge >= 0.0 && ridge.is_finite() {
        Ok(())
    } else {
        Err(CemError::NonFinite(format!("ridge must be finite and >= 0, got {ridge}")))
    }
}

pub fn logdet(c: &Covariance) -> Result<f64> {
    c.logdet()
}

pub fn trace(c: &Covariance) -> f64 {
    c.trace()
}

/// Exact multivariate normal log-density.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], c: &Covariance) -> Result<f64> {
    let d = c.dim();
    if x.len() != d || mean.len() != d {
        return Err(CemError::ShapeMismatch(format!(
            "logpdf: x has {} dims, mean {}, covariance {d}",
            x.len(),
            mean.len()
        )));
    }
    let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    Ok(-0.5 * (d as f64 * LN_2PI + c.logdet()? + c.mahalanobis_sq(&r)))
}

/// A Monte-Carlo estimate in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

const MC_CHUNK: usize = 1 << 15;

/// Monte-Carlo entropy of the noisy feature law `z ~ Σ πᵢ 𝒩(μᵢ, Σᵢ + Σ_p)`.
///
/// Samples are split into fixed-size chunks, each with its own ChaCha
/// stream, so the result depends only on `seed` and `n_samples` and not on
/// how many threads ran the chunks.
pub fn mc_entropy(
    mix: &GaussianMixture,
    noise: &NoiseModel,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(CemError::DegenerateData(
            "mc_entropy needs at least two samples".into(),
        ));
    }
    let comps = mix
        .components()
        .iter()
        .map(|c| {
            let cov = c.cov.with_added_variance(noise.variance())?;
            let logdet = cov.logdet()?;
            Ok(SamplingComponent {
                log_weight: c.weight.ln(),
                mean: c.mean.clone(),
                factor: cov.factor(),
                log_norm: -0.5 * (mix.dim() as f64 * LN_2PI + logdet),
                cov,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cumulative: Vec<f64> = mix
        .components()
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.weight;
            Some(*acc)
        })
        .collect();

    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let partials: Vec<(usize, f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let len = MC_CHUNK.min(n_samples - chunk * MC_CHUNK);
            let mut rng = seeded_rng(seed);
            rng.set_stream(chunk as u64);
            chunk_moments(&comps, &cumulative, mix.dim(), len, &mut rng)
        })
        .collect();

    // Chan et al. pairwise combination, in chunk order.
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for (nb, mb, m2b) in partials {
        let total = n + nb;
        let delta = mb - mean;
        mean += delta * nb as f64 / total as f64;
        m2 += m2b + delta * delta * (n as f64) * (nb as f64) / total as f64;
        n = total;
    }
    let var = m2 / (n as f64 - 1.0);
    Ok(McEstimate {
        value: mean,
        std_error: (var / n as f64).sqrt(),
        n_samples,
        seed,
    })
}

struct SamplingComponent {
    log_weight: f64,
    mean: Vec<f64>,
    factor: Matrix,
    log_norm: f64,
    cov: Covariance,
}

fn chunk_moments(
    comps: &[SamplingComponent],
    cumulative: &[f64],
    dim: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, f64, f64) {
    let total = *cumulative.last().unwrap_or(&1.0);
    let mut xi = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut r = vec![0.0; dim];
    let mut logs = vec![0.0; comps.len()];
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for s in 0..len {
        let u: f64 = rng.random::<f64>() * total;
        let idx = cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or(comps.len() - 1);
        let comp = &comps[idx];
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..dim {
            let mut acc = comp.mean[i];
            for k in 0..=i {
                acc += comp.factor[(i, k)] * xi[k];
            }
            z[i] = acc;
        }
        for (l, c) in logs.iter_mut().zip(comps) {
            for i in 0..dim {
                r[i] = z[i] - c.mean[i];
            }
            *l = c.log_weight + c.log_norm - 0.5 * c.cov.mahalanobis_sq(&r);
        }
        let neg_log_p = -log_sum_exp(&logs);
        let delta = neg_log_p - mean;
        mean += delta / (s + 1) as f64;
        m2 += delta * (neg_log_p - mean);
    }
    (len, mean, m2)
}
