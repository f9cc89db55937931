//! Closed-form information quantities.
//!
//! With `ẑ ~ Σ πᵢ 𝒩(μᵢ, Σᵢ)` and independent additive noise
//! `ε ~ 𝒩(0, Σ_p)`, the noisy feature `z = ẑ + ε` is again a mixture and
//!
//! ```text
//! I(z; ẑ) ≤ Σᵢ πᵢ (−ln πᵢ + ½ ln(|Σᵢ + Σ_p| / |Σ_p|))
//! H(x|z)  ≥ H(x) − I(z; ẑ)
//! ξ       ≥ exp(2 H(x|z) / d) / (2πe)
//! ```
//!
//! where `ξ` is the per-dimension MSE of the best possible reconstruction.
//! The first bound doubles as the training penalty (`cem_loss`); its
//! gradient with respect to the batch features is `cem_loss_grad`.
//! All entropies are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{CemError, Result};
use crate::mixture::{BatchAssignment, GaussianMixture};
use crate::numerics::{cholesky, cholesky_solve, ln_2pi_e, CovRepr, Covariance, Matrix, DEFAULT_RIDGE};

/// Isotropic additive Gaussian noise `ε ~ 𝒩(0, σ_p² I)`, independent of the
/// clean feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    std: f64,
}

impl NoiseModel {
    pub fn new(std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(CemError::NonFinite(format!("noise std must be finite and >= 0, got {std}")));
        }
        Ok(Self { std })
    }

    /// Noise with variance `variance` per coordinate. `dim` is accepted for
    /// readability at call sites; the model is dimension-free.
    pub fn isotropic(_dim: usize, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(CemError::NonFinite(format!("noise variance must be >= 0, got {variance}")));
        }
        Self::new(variance.sqrt())
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    /// `Σ_p` in `dim` dimensions. Zero noise carries the default ridge so the
    /// matrix can still be factorized.
    pub fn cov(&self, dim: usize) -> Result<Covariance> {
        let ridge = if self.std > 0.0 { 0.0 } else { DEFAULT_RIDGE };
        Covariance::isotropic(dim, self.variance(), ridge)
    }

    fn require_positive(&self) -> Result<()> {
        if self.std > 0.0 {
            Ok(())
        } else {
            Err(CemError::NonPositiveDefinite {
                pivot: 0,
                value: 0.0,
            })
        }
    }
}

/// Differential entropy `½ ln((2πe)^d |Σ|)`.
pub fn gaussian_entropy(c: &Covariance) -> Result<f64> {
    Ok(0.5 * (c.dim() as f64 * ln_2pi_e() + c.logdet()?))
}

/// Upper bound on the entropy of the noisy feature mixture:
/// `Σᵢ πᵢ (−ln πᵢ + ½ ln((2πe)^d |Σᵢ + Σ_p|))`.
pub fn mixture_entropy_upper(mix: &GaussianMixture, noise: &NoiseModel) -> Result<f64> {
    mix.components()
        .iter()
        .map(|c| {
            let h = gaussian_entropy(&c.cov.with_added_variance(noise.variance())?)?;
            Ok(c.weight * (-c.weight.ln() + h))
        })
        .sum()
}

/// `ln(|Σ + σ_p² I| / |σ_p² I|)`, evaluated as a log-ratio.
fn log_det_ratio(cov: &Covariance, noise: &NoiseModel) -> Result<f64> {
    let var = noise.variance();
    match cov.repr() {
        CovRepr::Diagonal(d) => Ok(d.iter().map(|v| (v + var).ln() - var.ln()).sum()),
        CovRepr::Full { .. } => {
            Ok(cov.with_added_variance(var)?.logdet()? - cov.dim() as f64 * var.ln())
        }
    }
}

/// Upper bound on `I(z; ẑ)`: `Σᵢ πᵢ (−ln πᵢ + ½ ln(|Σᵢ + Σ_p| / |Σ_p|))`.
pub fn mi_upper_bound(mix: &GaussianMixture, noise: &NoiseModel) -> Result<f64> {
    noise.require_positive()?;
    mix.components()
        .iter()
        .map(|c| Ok(c.weight * (-c.weight.ln() + 0.5 * log_det_ratio(&c.cov, noise)?)))
        .sum()
}

/// The conditional-entropy training penalty. Same value as [`mi_upper_bound`].
pub fn cem_loss(mix: &GaussianMixture, noise: &NoiseModel) -> Result<f64> {
    mi_upper_bound(mix, noise)
}

/// `H(x|z) ≥ H(x) − I(z; ẑ)`.
pub fn cond_entropy_lower(h_x: f64, mi: f64) -> f64 {
    h_x - mi
}

/// Lower bound on the per-dimension reconstruction MSE of any adversary.
pub fn mse_floor(h_cond: f64, d: usize) -> f64 {
    (2.0 * h_cond / d as f64).exp() / (2.0 * std::f64::consts::PI * std::f64::consts::E)
}

/// Gradient of [`cem_loss`] with respect to every row of `batch`.
///
/// Weights, means and the assignment are held fixed; only the batch
/// covariance term of the blend depends on the features. For a diagonal
/// component `j` holding row `i`:
///
/// ```text
/// ∂L/∂zᵢ[t] = πⱼ cⱼ (zᵢ[t] − μⱼ[t]) / (nⱼ (Σⱼ[t] + σ_p²))
/// ```
///
/// with `cⱼ` the clamped blend coefficient and `Σⱼ` already blended with
/// this batch.
pub fn cem_loss_grad(
    batch: &Matrix,
    assign: &BatchAssignment,
    mix: &GaussianMixture,
    noise: &NoiseModel,
) -> Result<Matrix> {
    if !mix.is_current_for(assign, batch) {
        return Err(CemError::StaleState);
    }
    noise.require_positive()?;
    let var = noise.variance();
    let mut grad = Matrix::zeros(batch.rows(), batch.cols());
    for (j, comp) in mix.components().iter().enumerate() {
        let nj = assign.counts[j];
        if nj == 0 {
            continue;
        }
        let scale = comp.weight * mix.blend_coefficient(j, nj) / nj as f64;
        let total = comp.cov.with_added_variance(var)?;
        for i in assign.members(j) {
            let r: Vec<f64> = batch.row(i).iter().zip(&comp.mean).map(|(z, m)| z - m).collect();
            let g = total.solve(&r);
            for (out, v) in grad.row_mut(i).iter_mut().zip(g) {
                *out = scale * v;
            }
        }
    }
    Ok(grad)
}

/// Jointly Gaussian world: `x ~ 𝒩(0, Σ_x)`, `z = W x + ε`.
#[derive(Debug, Clone)]
pub struct JointGaussianSpec {
    pub x_cov: Covariance,
    /// `W`, shape `d_z × d_x`.
    pub channel: Matrix,
    pub noise: NoiseModel,
}

impl JointGaussianSpec {
    pub fn new(x_cov: Covariance, channel: Matrix, noise: NoiseModel) -> Result<Self> {
        if channel.cols() != x_cov.dim() {
            return Err(CemError::ShapeMismatch(format!(
                "channel has {} columns, x has {} dims",
                channel.cols(),
                x_cov.dim()
            )));
        }
        Ok(Self {
            x_cov,
            channel,
            noise,
        })
    }

    pub fn x_dim(&self) -> usize {
        self.x_cov.dim()
    }

    pub fn z_dim(&self) -> usize {
        self.channel.rows()
    }

    /// Factor of `W Σ_x Wᵀ + Σ_p` and `W Σ_x`.
    fn innovation(&self) -> Result<(Matrix, Matrix)> {
        let sx = self.x_cov.to_matrix();
        let w_sx = self.channel.matmul(&sx);
        let mut s = w_sx.matmul_t(&self.channel);
        for i in 0..s.rows() {
            s[(i, i)] += self.noise.variance();
        }
        Ok((cholesky(&s, 0.0)?, w_sx))
    }

    /// `Cov(x|z) = Σ_x − Σ_x Wᵀ (W Σ_x Wᵀ + Σ_p)⁻¹ W Σ_x`.
    pub fn posterior_covariance(&self) -> Result<Matrix> {
        let (l, w_sx) = self.innovation()?;
        let solved = cholesky_solve(&l, &w_sx);
        let mut post = self.x_cov.to_matrix().sub(&w_sx.t_matmul(&solved));
        let n = post.rows();
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (post[(i, j)] + post[(j, i)]);
                post[(i, j)] = m;
                post[(j, i)] = m;
            }
        }
        Ok(post)
    }

    /// Posterior-mean gain `Σ_x Wᵀ (W Σ_x Wᵀ + Σ_p)⁻¹`, shape `d_x × d_z`.
    pub fn posterior_gain(&self) -> Result<Matrix> {
        let (l, w_sx) = self.innovation()?;
        Ok(cholesky_solve(&l, &w_sx).transpose())
    }

    pub fn x_entropy(&self) -> Result<f64> {
        gaussian_entropy(&self.x_cov)
    }

    /// Exact `H(x|z)`.
    pub fn cond_entropy(&self) -> Result<f64> {
        gaussian_entropy(&Covariance::full_with_ridge(self.posterior_covariance()?, 0.0)?)
    }

    /// Law of the clean feature `ẑ = W x` as a one-component mixture.
    pub fn feature_mixture(&self, dataset_size: usize) -> Result<GaussianMixture> {
        let sx = self.x_cov.to_matrix();
        let cov = self.channel.matmul(&sx).matmul_t(&self.channel);
        GaussianMixture::new(
            vec![crate::mixture::GaussianComponent {
                weight: 1.0,
                mean: vec![0.0; self.z_dim()],
                // W Σ_x Wᵀ may be singular; the ridge only serves factorization
                // and is dropped once the noise variance is added.
                cov: Covariance::full(cov)?,
            }],
            dataset_size,
        )
    }
}

/// Expected minimal per-dimension reconstruction MSE, `Tr(Cov(x|z)) / d_x`.
pub fn minimal_mse_oracle(spec: &JointGaussianSpec) -> Result<f64> {
    Ok(spec.posterior_covariance()?.trace() / spec.x_dim() as f64)
}

/// Bound summary for one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub mi_bound: f64,
    pub rel_cond_entropy: f64,
    pub mse_floor: f64,
    pub h_x_offset: f64,
    pub cem_loss: f64,
}

impl BoundsReport {
    /// `input_dim` is the dimensionality of `x`, which sets the MSE floor's
    /// exponent.
    pub fn compute(
        mix: &GaussianMixture,
        noise: &NoiseModel,
        h_x_offset: f64,
        input_dim: usize,
    ) -> Result<Self> {
        let mi = mi_upper_bound(mix, noise)?;
        Ok(Self {
            mi_bound: mi,
            rel_cond_entropy: -mi,
            mse_floor: mse_floor(cond_entropy_lower(h_x_offset, mi), input_dim),
            h_x_offset,
            cem_loss: cem_loss(mix, noise)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{assign_nearest, GaussianComponent};
    use crate::numerics::{seeded_rng, LN_2PI};
    use proptest::prelude::*;
    use rand::Rng;

    const HALF_LN_2PIE: f64 = 1.418_938_533_204_672_7;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn scalar_mix(weights: &[f64], vars: &[f64]) -> GaussianMixture {
        let comps = weights
            .iter()
            .zip(vars)
            .enumerate()
            .map(|(i, (w, v))| GaussianComponent {
                weight: *w,
                mean: vec![i as f64 * 10.0],
                cov: Covariance::diagonal(vec![*v]).unwrap(),
            })
            .collect();
        GaussianMixture::new(comps, 100).unwrap()
    }

    #[test]
    fn gaussian_entropy_examples() {
        close(gaussian_entropy(&Covariance::diagonal_with_ridge(vec![1.0], 0.0).unwrap()).unwrap(), HALF_LN_2PIE, 1e-12);
        close(
            gaussian_entropy(&Covariance::isotropic(2, 1.0, 0.0).unwrap()).unwrap(),
            2.0 * HALF_LN_2PIE,
            1e-12,
        );
        let unit = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
        close(gaussian_entropy(&Covariance::diagonal_with_ridge(vec![unit], 0.0).unwrap()).unwrap(), 0.0, 1e-12);
        assert!((HALF_LN_2PIE - 0.5 * (LN_2PI + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn mixture_entropy_upper_examples() {
        let unit = NoiseModel::isotropic(1, 1.0).unwrap();
        close(mixture_entropy_upper(&scalar_mix(&[1.0], &[0.0]), &unit).unwrap(), HALF_LN_2PIE, 1e-12);
        close(
            mixture_entropy_upper(&scalar_mix(&[0.5, 0.5], &[0.0, 0.0]), &unit).unwrap(),
            2f64.ln() + HALF_LN_2PIE,
            1e-12,
        );
        let skewed = scalar_mix(&[1.0 - 1e-8, 1e-8], &[0.0, 0.0]);
        let h = mixture_entropy_upper(&skewed, &unit).unwrap();
        let label = -(1.0 - 1e-8f64) * (1.0 - 1e-8f64).ln() - 1e-8 * 1e-8f64.ln();
        close(h, HALF_LN_2PIE + label, 1e-12);
        assert!(h - HALF_LN_2PIE < 2e-7);
    }

    #[test]
    fn mi_upper_bound_examples() {
        let unit = NoiseModel::isotropic(1, 1.0).unwrap();
        close(mi_upper_bound(&scalar_mix(&[1.0], &[0.0]), &unit).unwrap(), 0.0, 0.0);
        close(mi_upper_bound(&scalar_mix(&[0.5, 0.5], &[0.0, 0.0]), &unit).unwrap(), 2f64.ln(), 1e-15);
        close(mi_upper_bound(&scalar_mix(&[1.0], &[3.0]), &unit).unwrap(), 2f64.ln(), 1e-15);
        for (mix, expect) in [
            (scalar_mix(&[1.0], &[0.0]), 0.0),
            (scalar_mix(&[0.5, 0.5], &[0.0, 0.0]), 2f64.ln()),
            (scalar_mix(&[1.0], &[3.0]), 2f64.ln()),
        ] {
            close(cem_loss(&mix, &unit).unwrap(), expect, 1e-15);
        }
        let silent = NoiseModel::new(0.0).unwrap();
        assert!(matches!(
            mi_upper_bound(&scalar_mix(&[1.0], &[1.0]), &silent),
            Err(CemError::NonPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cond_entropy_and_floor_examples() {
        close(cond_entropy_lower(5.0, 0.0), 5.0, 0.0);
        close(cond_entropy_lower(0.0, 2f64.ln()), -std::f64::consts::LN_2, 1e-15);
        let h = 2.0 * (ln_2pi_e() + 0.04f64.ln());
        close(mse_floor(h, 4), 0.04, 1e-15);
        close(mse_floor(0.0, 1), 0.058_549_831_524_319_16, 1e-15);
    }

    fn scalar_spec(sx: f64, w: f64, noise_var: f64) -> JointGaussianSpec {
        JointGaussianSpec::new(
            Covariance::diagonal_with_ridge(vec![sx], 0.0).unwrap(),
            Matrix::from_rows(&[vec![w]]).unwrap(),
            NoiseModel::isotropic(1, noise_var).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn oracle_examples() {
        let spec = scalar_spec(1.0, 1.0, 1.0);
        close(minimal_mse_oracle(&spec).unwrap(), 0.5, 1e-15);
        let h = spec.cond_entropy().unwrap();
        close(h, 0.5 * (ln_2pi_e() + 0.5f64.ln()), 1e-12);
        close(mse_floor(h, 1), 0.5, 1e-12);

        let d = 3;
        let noiseless = JointGaussianSpec::new(
            Covariance::isotropic(d, 1.0, 0.0).unwrap(),
            Matrix::identity(d),
            NoiseModel::isotropic(d, 1e-12).unwrap(),
        )
        .unwrap();
        assert!(minimal_mse_oracle(&noiseless).unwrap() < 1e-11);

        let sx = Covariance::diagonal_with_ridge(vec![1.0, 2.0, 4.0], 0.0).unwrap();
        let blind = JointGaussianSpec::new(sx, Matrix::zeros(2, 3), NoiseModel::new(0.3).unwrap()).unwrap();
        close(minimal_mse_oracle(&blind).unwrap(), 7.0 / 3.0, 1e-15);
    }

    #[test]
    fn single_gaussian_bound_is_exact_conditional_entropy() {
        let mut rng = seeded_rng(17);
        for _ in 0..10 {
            let spec = crate::data::random_joint_gaussian(&mut rng, 6, false).unwrap();
            let mix = spec.feature_mixture(1000).unwrap();
            let mi = mi_upper_bound(&mix, &spec.noise).unwrap();
            let lower = cond_entropy_lower(spec.x_entropy().unwrap(), mi);
            close(lower, spec.cond_entropy().unwrap(), 1e-9);
        }
    }

    #[test]
    fn theorem_one_is_tight_for_isotropic_posteriors_and_one_sided_otherwise() {
        let mut rng = seeded_rng(23);
        for _ in 0..20 {
            let spec = crate::data::random_joint_gaussian(&mut rng, 8, true).unwrap();
            let floor = mse_floor(spec.cond_entropy().unwrap(), spec.x_dim());
            close(floor, minimal_mse_oracle(&spec).unwrap(), 1e-9);
        }
        for _ in 0..20 {
            let spec = crate::data::random_joint_gaussian(&mut rng, 8, false).unwrap();
            let floor = mse_floor(spec.cond_entropy().unwrap(), spec.x_dim());
            assert!(floor <= minimal_mse_oracle(&spec).unwrap() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn bounds_report_fields_agree() {
        let mix = scalar_mix(&[0.4, 0.6], &[0.3, 0.1]);
        let noise = NoiseModel::new(0.2).unwrap();
        let r = BoundsReport::compute(&mix, &noise, 1.5, 4).unwrap();
        assert_eq!(r.cem_loss, r.mi_bound);
        assert_eq!(r.rel_cond_entropy, -r.mi_bound);
        close(r.mse_floor, mse_floor(1.5 - r.mi_bound, 4), 0.0);
    }

    #[test]
    fn mi_bound_decreases_with_noise() {
        let mix = scalar_mix(&[0.3, 0.7], &[0.5, 0.0]);
        let mut prev = f64::INFINITY;
        for i in 1..40 {
            let v = mi_upper_bound(&mix, &NoiseModel::isotropic(1, 0.01 * i as f64).unwrap()).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn random_mix(rng: &mut impl Rng, k: usize, d: usize, n: usize) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let comps = raw
            .iter()
            .map(|w| GaussianComponent {
                weight: w / total,
                mean: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                cov: Covariance::diagonal((0..d).map(|_| rng.random_range(0.01..0.5)).collect()).unwrap(),
            })
            .collect();
        GaussianMixture::new(comps, n).unwrap()
    }

    /// Loss as a function of the raw batch, re-running the covariance blend.
    fn loss_of_batch(
        weighted: &GaussianMixture,
        assign: &BatchAssignment,
        batch: &Matrix,
        noise: &NoiseModel,
    ) -> f64 {
        cem_loss(&weighted.update_covariance(assign, batch).unwrap(), noise).unwrap()
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = seeded_rng(5);
        let noise = NoiseModel::new(0.3).unwrap();
        let h = 1e-5;
        for _ in 0..100 {
            let (k, d, nb) = (2, 3, 12);
            let mix = random_mix(&mut rng, k, d, 40);
            let rows: Vec<Vec<f64>> = (0..nb)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let batch = Matrix::from_rows(&rows).unwrap();
            let assign = assign_nearest(&batch, &mix).unwrap();
            let weighted = mix.update_weights(&assign).unwrap();
            let updated = weighted.update_covariance(&assign, &batch).unwrap();
            let grad = cem_loss_grad(&batch, &assign, &updated, &noise).unwrap();
            for i in 0..nb {
                for t in 0..d {
                    let mut plus = batch.clone();
                    plus[(i, t)] += h;
                    let mut minus = batch.clone();
                    minus[(i, t)] -= h;
                    let fd = (loss_of_batch(&weighted, &assign, &plus, &noise)
                        - loss_of_batch(&weighted, &assign, &minus, &noise))
                        / (2.0 * h);
                    let g = grad[(i, t)];
                    let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "row {i} dim {t}: {g} vs {fd} rel {rel}");
                }
            }
        }
    }

    #[test]
    fn grad_full_covariance_matches_central_differences() {
        let mut rng = seeded_rng(8);
        let noise = NoiseModel::new(0.5).unwrap();
        let h = 1e-5;
        let d = 2;
        let comps = (0..2)
            .map(|j| GaussianComponent {
                weight: 0.5,
                mean: vec![j as f64 * 4.0; d],
                cov: Covariance::full(Matrix::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.3]]).unwrap()).unwrap(),
            })
            .collect();
        let mix = GaussianMixture::new(comps, 30).unwrap();
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..d).map(|_| rng.random_range(-1.0..1.0) + (i % 2) as f64 * 4.0).collect())
            .collect();
        let batch = Matrix::from_rows(&rows).unwrap();
        let assign = assign_nearest(&batch, &mix).unwrap();
        let weighted = mix.update_weights(&assign).unwrap();
        let updated = weighted.update_covariance(&assign, &batch).unwrap();
        let grad = cem_loss_grad(&batch, &assign, &updated, &noise).unwrap();
        for i in 0..batch.rows() {
            for t in 0..d {
                let mut plus = batch.clone();
                plus[(i, t)] += h;
                let mut minus = batch.clone();
                minus[(i, t)] -= h;
                let fd = (loss_of_batch(&weighted, &assign, &plus, &noise)
                    - loss_of_batch(&weighted, &assign, &minus, &noise))
                    / (2.0 * h);
                let g = grad[(i, t)];
                assert!((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6) <= 1e-5, "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn grad_edge_cases() {
        let noise = NoiseModel::new(0.5).unwrap();
        let mix = scalar_mix(&[0.5, 0.5], &[0.2, 0.2]);
        let centered = Matrix::from_rows(&[vec![0.0], vec![10.0], vec![0.0]]).unwrap();
        let a = assign_nearest(&centered, &mix).unwrap();
        let m = mix.update_weights(&a).unwrap().update_covariance(&a, &centered).unwrap();
        let g = cem_loss_grad(&centered, &a, &m, &noise).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));

        for z in [-0.7, 0.4] {
            let single = Matrix::from_rows(&[vec![z]]).unwrap();
            let a = assign_nearest(&single, &mix).unwrap();
            let m = mix.update_weights(&a).unwrap().update_covariance(&a, &single).unwrap();
            let g = cem_loss_grad(&single, &a, &m, &noise).unwrap();
            assert_eq!(g[(0, 0)].signum(), z.signum());
        }

        let single = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let a = assign_nearest(&single, &mix).unwrap();
        let stale = mix.update_weights(&a).unwrap();
        assert!(matches!(cem_loss_grad(&single, &a, &stale, &noise), Err(CemError::StaleState)));
    }

    proptest! {
        #[test]
        fn decomposition_identity_holds(seed in any::<u64>(), k in 1usize..6, d in 1usize..5, var in 0.001f64..2.0) {
            let mut rng = seeded_rng(seed);
            let mix = random_mix(&mut rng, k, d, 100);
            let noise = NoiseModel::isotropic(d, var).unwrap();
            let mi = mi_upper_bound(&mix, &noise).unwrap();
            let h = mixture_entropy_upper(&mix, &noise).unwrap();
            let hp = gaussian_entropy(&noise.cov(d).unwrap()).unwrap();
            prop_assert!((mi - (h - hp)).abs() <= 1e-10);
            prop_assert!(mi >= 0.0);
        }
    }
}
