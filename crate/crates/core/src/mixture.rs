//! Gaussian mixture over noisy features.
//!
//! The mixture is fit once per epoch (k-means++ seeding plus Lloyd rounds)
//! and then tracked through the batch loop with hard nearest-mean
//! assignment: weights by the streaming frequency update, covariances by
//! a convex blend toward the batch covariance about the stored means.
//! Means only move at refit time.

use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::NoiseModel;
use crate::error::{CemError, Result};
use crate::numerics::{
    gaussian_logpdf, log_sum_exp, seeded_rng, squared_distance, CovRepr, Covariance, Matrix,
    DEFAULT_RIDGE,
};

/// Lower bound applied to every mixture weight before renormalization.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    dim: usize,
    dataset_size: usize,
    /// Fingerprint of the (assignment, batch) pair the covariances were
    /// last blended with; cleared whenever the weights move.
    cov_stamp: Option<u64>,
}

/// Hard assignment of one batch to its nearest components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchAssignment {
    pub indices: Vec<usize>,
    pub counts: Vec<usize>,
    pub batch_size: usize,
}

impl BatchAssignment {
    /// Rows of the batch assigned to component `j`.
    pub fn members(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.indices
            .iter()
            .enumerate()
            .filter_map(move |(i, &c)| (c == j).then_some(i))
    }

    fn fingerprint(&self, batch: &Matrix) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.indices.hash(&mut h);
        self.batch_size.hash(&mut h);
        batch.shape().hash(&mut h);
        for v in batch.as_slice() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>, dataset_size: usize) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(CemError::DegenerateData("mixture needs at least one component".into()));
        };
        let dim = first.mean.len();
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.dim() != dim {
                return Err(CemError::ShapeMismatch(format!(
                    "component {i}: mean has {} dims and covariance {}, expected {dim}",
                    c.mean.len(),
                    c.cov.dim()
                )));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(CemError::DegenerateData(format!(
                    "component {i}: weight {} outside (0, 1]",
                    c.weight
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CemError::DegenerateData(format!("weights sum to {total}, expected 1")));
        }
        if dataset_size == 0 {
            return Err(CemError::DegenerateData("dataset size must be positive".into()));
        }
        Ok(Self {
            components,
            dim,
            dataset_size,
            cov_stamp: None,
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    /// Whether the covariances were blended with exactly this batch.
    pub fn is_current_for(&self, assign: &BatchAssignment, batch: &Matrix) -> bool {
        self.cov_stamp == Some(assign.fingerprint(batch))
    }

    /// Refit on a new feature set, warm-starting Lloyd from the current means.
    pub fn refit(&self, features: &Matrix, iters: usize) -> Result<Self> {
        check_features(features, self.dim)?;
        if features.rows() == 0 {
            return Err(CemError::DegenerateData("refit on an empty feature set".into()));
        }
        let means = lloyd(features, self.means(), iters);
        let assign = assign_to(features, &means);
        let fallback: Vec<Covariance> = self.components.iter().map(|c| c.cov.clone()).collect();
        build_from_assignment(features, means, &assign, Some(&fallback))
    }

    /// Streaming weight update: `πⱼ ← (πⱼ (N − N_batch) + nⱼ) / N`, then floor
    /// and renormalize.
    pub fn update_weights(&self, assign: &BatchAssignment) -> Result<Self> {
        self.check_assignment(assign)?;
        if assign.batch_size > self.dataset_size {
            return Err(CemError::ShapeMismatch(format!(
                "batch of {} exceeds dataset size {}",
                assign.batch_size, self.dataset_size
            )));
        }
        let n = self.dataset_size as f64;
        let kept = (self.dataset_size - assign.batch_size) as f64;
        let raw: Vec<f64> = self
            .components
            .iter()
            .zip(&assign.counts)
            .map(|(c, &nj)| (c.weight * kept + nj as f64) / n)
            .collect();
        let weights = floor_and_normalize(&raw);
        let mut next = self.clone();
        for (c, w) in next.components.iter_mut().zip(weights) {
            c.weight = w;
        }
        next.cov_stamp = None;
        Ok(next)
    }

    /// Blend coefficient `nⱼ / (πⱼ N)`, clamped to `[0, 1]`.
    pub fn blend_coefficient(&self, j: usize, count: usize) -> f64 {
        let denom = self.components[j].weight * self.dataset_size as f64;
        (count as f64 / denom).clamp(0.0, 1.0)
    }

    /// Streaming covariance update `Σⱼ ← (1 − c) Σⱼ + c ΔΣⱼ` with
    /// `c = nⱼ / (πⱼ N)` and `ΔΣⱼ` the batch covariance about `μⱼ`.
    /// Components that received no samples are left alone.
    pub fn update_covariance(&self, assign: &BatchAssignment, batch: &Matrix) -> Result<Self> {
        self.check_assignment(assign)?;
        check_features(batch, self.dim)?;
        if batch.rows() != assign.batch_size {
            return Err(CemError::ShapeMismatch(format!(
                "batch has {} rows, assignment covers {}",
                batch.rows(),
                assign.batch_size
            )));
        }
        let mut next = self.clone();
        for (j, comp) in next.components.iter_mut().enumerate() {
            let nj = assign.counts[j];
            if nj == 0 {
                continue;
            }
            let c = self.blend_coefficient(j, nj);
            let members: Vec<usize> = assign.members(j).collect();
            comp.cov = blend(&comp.cov, &comp.mean, batch, &members, c)?;
        }
        next.cov_stamp = Some(assign.fingerprint(batch));
        Ok(next)
    }

    fn check_assignment(&self, assign: &BatchAssignment) -> Result<()> {
        if assign.counts.len() != self.k() {
            return Err(CemError::ShapeMismatch(format!(
                "assignment has {} clusters, mixture has {}",
                assign.counts.len(),
                self.k()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| CemError::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CemError::io(path, e))?;
        let ckpt: MixtureCheckpoint = serde_json::from_str(&text)
            .map_err(|e| CemError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ckpt)
    }

    pub fn to_checkpoint(&self) -> MixtureCheckpoint {
        MixtureCheckpoint {
            dim: self.dim,
            dataset_size: self.dataset_size,
            components: self
                .components
                .iter()
                .map(|c| ComponentRecord {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    cov_diag: c.cov.diag(),
                    cov_full: match c.cov.repr() {
                        CovRepr::Diagonal(_) => None,
                        CovRepr::Full { matrix, .. } => Some(matrix.as_slice().to_vec()),
                    },
                    ridge: c.cov.ridge(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: MixtureCheckpoint) -> Result<Self> {
        let components = ckpt
            .components
            .into_iter()
            .map(|r| {
                let cov = match r.cov_full {
                    Some(values) => Covariance::full_with_ridge(
                        Matrix::from_vec(ckpt.dim, ckpt.dim, values)?,
                        r.ridge,
                    )?,
                    None => Covariance::diagonal_with_ridge(r.cov_diag, r.ridge)?,
                };
                Ok(GaussianComponent {
                    weight: r.weight,
                    mean: r.mean,
                    cov,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mix = Self::new(components, ckpt.dataset_size)?;
        if mix.dim != ckpt.dim {
            return Err(CemError::ShapeMismatch(format!(
                "checkpoint declares dim {} but components have {}",
                ckpt.dim, mix.dim
            )));
        }
        Ok(mix)
    }
}

/// On-disk form of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureCheckpoint {
    pub dim: usize,
    pub dataset_size: usize,
    pub components: Vec<ComponentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_full: Option<Vec<f64>>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

fn check_features(features: &Matrix, dim: usize) -> Result<()> {
    if features.cols() != dim {
        return Err(CemError::ShapeMismatch(format!(
            "features have {} columns, mixture has {dim}",
            features.cols()
        )));
    }
    if !features.is_finite() {
        return Err(CemError::NonFinite("features contain NaN or infinity".into()));
    }
    Ok(())
}

fn floor_and_normalize(raw: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = raw.iter().map(|w| w.max(WEIGHT_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    floored.iter().map(|w| w / total).collect()
}

fn blend(
    cov: &Covariance,
    mean: &[f64],
    batch: &Matrix,
    members: &[usize],
    c: f64,
) -> Result<Covariance> {
    let n = members.len() as f64;
    match cov.repr() {
        CovRepr::Diagonal(old) => {
            let mut delta = vec![0.0; mean.len()];
            for &i in members {
                for ((d, z), mu) in delta.iter_mut().zip(batch.row(i)).zip(mean) {
                    *d += (z - mu) * (z - mu);
                }
            }
            let entries = old
                .iter()
                .zip(&delta)
                .map(|(o, d)| ((1.0 - c) * o + c * d / n).max(0.0))
                .collect();
            Covariance::diagonal_with_ridge(entries, cov.ridge())
        }
        CovRepr::Full { matrix, .. } => {
            let d = mean.len();
            let mut delta = Matrix::zeros(d, d);
            for &i in members {
                let r: Vec<f64> = batch.row(i).iter().zip(mean).map(|(z, m)| z - m).collect();
                for a in 0..d {
                    for b in 0..d {
                        delta[(a, b)] += r[a] * r[b];
                    }
                }
            }
            let blended = matrix.scale(1.0 - c).add(&delta.scale(c / n));
            Covariance::full_with_ridge(blended, cov.ridge())
        }
    }
}

/// Index of the nearest mean; ties go to the lowest index.
fn nearest(z: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, m) in means.iter().enumerate() {
        let d = squared_distance(z, m);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn assign_to(batch: &Matrix, means: &[Vec<f64>]) -> BatchAssignment {
    let mut counts = vec![0; means.len()];
    let indices = batch
        .row_iter()
        .map(|z| {
            let j = nearest(z, means);
            counts[j] += 1;
            j
        })
        .collect();
    BatchAssignment {
        indices,
        counts,
        batch_size: batch.rows(),
    }
}

/// Map every row of `batch` to its nearest mixture mean (Euclidean).
pub fn assign_nearest(batch: &Matrix, mix: &GaussianMixture) -> Result<BatchAssignment> {
    check_features(batch, mix.dim())?;
    Ok(assign_to(batch, &mix.means()))
}

fn lloyd(features: &Matrix, mut means: Vec<Vec<f64>>, iters: usize) -> Vec<Vec<f64>> {
    let d = features.cols();
    for _ in 0..iters {
        let assign = assign_to(features, &means);
        let mut sums = vec![vec![0.0; d]; means.len()];
        for (row, &j) in features.row_iter().zip(&assign.indices) {
            for (s, v) in sums[j].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut moved = false;
        for (j, sum) in sums.into_iter().enumerate() {
            let nj = assign.counts[j];
            if nj == 0 {
                continue;
            }
            let m: Vec<f64> = sum.into_iter().map(|s| s / nj as f64).collect();
            moved |= m != means[j];
            means[j] = m;
        }
        moved |= reseed_empty(features, &mut means, &assign);
        if !moved {
            break;
        }
    }
    means
}

/// Move each empty cluster onto the sample farthest from its assigned mean,
/// taking samples only from clusters that can spare one. Returns whether any
/// mean moved.
fn reseed_empty(features: &Matrix, means: &mut [Vec<f64>], assign: &BatchAssignment) -> bool {
    let mut counts = assign.counts.clone();
    let mut taken = vec![false; features.rows()];
    let mut moved = false;
    for j in 0..means.len() {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, (row, &owner)) in features.row_iter().zip(&assign.indices).enumerate() {
            if taken[i] || counts[owner] < 2 {
                continue;
            }
            let dist = squared_distance(row, &means[owner]);
            if dist > 0.0 && best.is_none_or(|(_, b)| dist > b) {
                best = Some((i, dist));
            }
        }
        let Some((i, _)) = best else { break };
        taken[i] = true;
        counts[assign.indices[i]] -= 1;
        counts[j] = 1;
        means[j] = features.row(i).to_vec();
        moved = true;
    }
    moved
}

fn build_from_assignment(
    features: &Matrix,
    means: Vec<Vec<f64>>,
    assign: &BatchAssignment,
    fallback: Option<&[Covariance]>,
) -> Result<GaussianMixture> {
    let n = features.rows() as f64;
    let d = features.cols();
    let raw: Vec<f64> = assign.counts.iter().map(|&c| c as f64 / n).collect();
    let weights = floor_and_normalize(&raw);
    let mut comps = Vec::with_capacity(means.len());
    for (j, (mean, weight)) in means.into_iter().zip(weights).enumerate() {
        let nj = assign.counts[j];
        let cov = if nj == 0 {
            match fallback {
                Some(prev) => prev[j].clone(),
                None => Covariance::diagonal(vec![0.0; d])?,
            }
        } else {
            let mut var = vec![0.0; d];
            for i in assign.members(j) {
                for ((v, z), mu) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                    *v += (z - mu) * (z - mu);
                }
            }
            Covariance::diagonal(var.into_iter().map(|v| v / nj as f64).collect())?
        };
        comps.push(GaussianComponent { weight, mean, cov });
    }
    GaussianMixture::new(comps, features.rows())
}

/// Initial fit: k-means++ seeding, `iters` Lloyd rounds, then cluster
/// frequencies and within-cluster diagonal covariances.
pub fn fit_init(features: &Matrix, k: usize, seed: u64, iters: usize) -> Result<GaussianMixture> {
    let n = features.rows();
    if k == 0 {
        return Err(CemError::DegenerateData("k must be positive".into()));
    }
    if n < k {
        return Err(CemError::DegenerateData(format!("{n} samples cannot seed {k} clusters")));
    }
    check_features(features, features.cols())?;
    let distinct: HashSet<Vec<u64>> = features
        .row_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(CemError::DegenerateData(format!(
            "only {} distinct feature vectors for {k} clusters",
            distinct.len()
        )));
    }

    let mut rng = seeded_rng(seed);
    let mut means = vec![features.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = features
        .row_iter()
        .map(|r| squared_distance(r, &means[0]))
        .collect();
    while means.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let next = features.row(pick.expect("distinct rows remain")).to_vec();
        for (w, r) in d2.iter_mut().zip(features.row_iter()) {
            *w = w.min(squared_distance(r, &next));
        }
        means.push(next);
    }

    let means = lloyd(features, means, iters);
    let assign = assign_to(features, &means);
    build_from_assignment(features, means, &assign, None)
}

/// Component responsibilities `πᵢ 𝒩(z; μᵢ, Σᵢ + Σ_p) / Σₗ πₗ 𝒩(z; μₗ, Σₗ + Σ_p)`.
pub fn responsibilities(z: &[f64], mix: &GaussianMixture, noise: &NoiseModel) -> Result<Vec<f64>> {
    let logs = mix
        .components()
        .iter()
        .map(|c| {
            let cov = c.cov.with_added_variance(noise.variance())?;
            Ok(c.weight.ln() + gaussian_logpdf(z, &c.mean, &cov)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let norm = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - norm).exp()).collect())
}

/// Posterior probability that `z` came from component `j`.
pub fn posterior_utility(
    z: &[f64],
    mix: &GaussianMixture,
    noise: &NoiseModel,
    j: usize,
) -> Result<f64> {
    if j >= mix.k() {
        return Err(CemError::ShapeMismatch(format!(
            "component {j} out of range for k = {}",
            mix.k()
        )));
    }
    Ok(responsibilities(z, mix, noise)?[j])
}
