//! Model inversion: an attacker with the frozen encoder and the training
//! data learns to map released features back to inputs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bounds::{mse_floor, JointGaussianSpec, NoiseModel};
use crate::error::{CemError, Result};
use crate::network::{noise_inject, Activation, NeuralModule};
use crate::numerics::{derive_seed, seeded_rng, Matrix};

const STREAM_ATTACK_INIT: u64 = 11;
const STREAM_ATTACK_NOISE: u64 = 12;
const STREAM_ATTACK_SHUFFLE: u64 = 13;
const STREAM_EVAL_TRAIN: u64 = 14;
const STREAM_EVAL_TEST: u64 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    /// Sigmoid for inputs in `[0, 1]`; identity for unbounded inputs.
    pub output: Activation,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.005,
            momentum: 0.9,
            batch_size: 8,
            hidden_dims: vec![64, 64],
            output: Activation::Sigmoid,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mse_train: f64,
    pub mse_infer: f64,
    pub psnr_train: f64,
    pub psnr_infer: f64,
    /// Lower bound on either MSE implied by the conditional entropy estimate.
    pub floor: f64,
}

/// PSNR in dB for signals in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Anything that maps released features to input estimates.
pub trait Reconstructor {
    fn reconstruct(&self, z: &Matrix) -> Result<Matrix>;
}

impl Reconstructor for NeuralModule {
    fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        self.predict(z)
    }
}

/// `z ↦ G z` with `G` the posterior gain of a jointly Gaussian world.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMeanMap {
    /// `d_x × d_z`.
    pub gain: Matrix,
}

impl Reconstructor for PosteriorMeanMap {
    fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.gain.cols() {
            return Err(CemError::ShapeMismatch(format!(
                "posterior map takes {} features, got {}",
                self.gain.cols(),
                z.cols()
            )));
        }
        Ok(z.matmul_t(&self.gain))
    }
}

/// Exact `E[x|z]` for a jointly Gaussian world.
pub fn gaussian_posterior_attacker(spec: &JointGaussianSpec) -> Result<PosteriorMeanMap> {
    Ok(PosteriorMeanMap {
        gain: spec.posterior_gain()?,
    })
}

pub fn init_attacker(d_z: usize, d_x: usize, cfg: &AttackConfig) -> Result<NeuralModule> {
    let mut dims = vec![d_z];
    dims.extend(&cfg.hidden_dims);
    dims.push(d_x);
    let mut acts = vec![Activation::Relu; cfg.hidden_dims.len()];
    acts.push(cfg.output);
    NeuralModule::dense(&dims, &acts, derive_seed(cfg.seed, STREAM_ATTACK_INIT, 0))
}

/// Train an inversion network on `inputs` against the frozen `encoder`,
/// minimizing mean `‖x̂ − x‖² / d`. Features get one fresh noise draw per
/// epoch.
pub fn train_attacker(
    encoder: &NeuralModule,
    noise: &NoiseModel,
    inputs: &Matrix,
    cfg: &AttackConfig,
) -> Result<NeuralModule> {
    if cfg.epochs == 0 {
        return Err(CemError::Parse("attack epochs must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(CemError::Parse("attack batch_size must be positive".into()));
    }
    let zhat = encoder.predict(inputs)?;
    let (n, d) = inputs.shape();
    let mut attacker = init_attacker(zhat.cols(), d, cfg)?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let z = noise_inject(&zhat, noise, derive_seed(cfg.seed, STREAM_ATTACK_NOISE, epoch as u64));
        order.shuffle(&mut seeded_rng(derive_seed(cfg.seed, STREAM_ATTACK_SHUFFLE, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let zb = z.select_rows(chunk);
            let xb = inputs.select_rows(chunk);
            let (xr, tape) = attacker.forward(&zb)?;
            let grad = xr.sub(&xb).scale(2.0 / (chunk.len() * d) as f64);
            let (g, _) = attacker.backward(tape, &grad)?;
            attacker.sgd_step(&g, cfg.lr, cfg.momentum).map_err(|e| match e {
                CemError::NonFinite(m) => {
                    CemError::NonFinite(format!("attacker epoch {}: {m}", epoch + 1))
                }
                other => other,
            })?;
        }
    }
    Ok(attacker)
}

/// Per-entry reconstruction MSE over one fresh noise draw.
pub fn reconstruction_mse<R: Reconstructor + ?Sized>(
    attacker: &R,
    encoder: &NeuralModule,
    noise: &NoiseModel,
    inputs: &Matrix,
    seed: u64,
) -> Result<f64> {
    let z = noise_inject(&encoder.predict(inputs)?, noise, seed);
    let xr = attacker.reconstruct(&z)?;
    if xr.shape() != inputs.shape() {
        return Err(CemError::ShapeMismatch(format!(
            "reconstruction is {:?}, inputs are {:?}",
            xr.shape(),
            inputs.shape()
        )));
    }
    Ok(xr.mean_squared_error(inputs))
}

/// MSE and PSNR on both splits. `cond_entropy` is the estimate of
/// `H(x|z)` (relative or absolute) used for the floor.
pub fn evaluate_attack<R: Reconstructor + ?Sized>(
    attacker: &R,
    encoder: &NeuralModule,
    noise: &NoiseModel,
    train: &Matrix,
    test: &Matrix,
    seed: u64,
    cond_entropy: f64,
) -> Result<AttackReport> {
    let mse_train = reconstruction_mse(attacker, encoder, noise, train, derive_seed(seed, STREAM_EVAL_TRAIN, 0))?;
    let mse_infer = reconstruction_mse(attacker, encoder, noise, test, derive_seed(seed, STREAM_EVAL_TEST, 0))?;
    Ok(AttackReport {
        mse_train,
        mse_infer,
        psnr_train: psnr(mse_train),
        psnr_infer: psnr(mse_infer),
        floor: mse_floor(cond_entropy, train.cols()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::minimal_mse_oracle;
    use crate::data::{sample_gaussian, synth_blobs};
    use crate::network::Dense;
    use crate::numerics::Covariance;

    #[test]
    fn psnr_definition() {
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_map_examples() {
        let scalar = JointGaussianSpec::new(
            Covariance::diagonal(vec![1.0]).unwrap(),
            Matrix::identity(1),
            NoiseModel::new(1.0).unwrap(),
        )
        .unwrap();
        let map = gaussian_posterior_attacker(&scalar).unwrap();
        assert!((map.gain[(0, 0)] - 0.5).abs() < 1e-15);

        let near_noiseless = JointGaussianSpec::new(
            Covariance::diagonal(vec![1.0, 2.0, 0.5]).unwrap(),
            Matrix::identity(3),
            NoiseModel::new(1e-6).unwrap(),
        )
        .unwrap();
        let map = gaussian_posterior_attacker(&near_noiseless).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((map.gain[(i, j)] - e).abs() < 1e-9);
            }
        }

        let blind = JointGaussianSpec::new(
            Covariance::diagonal(vec![1.0, 2.0]).unwrap(),
            Matrix::zeros(3, 2),
            NoiseModel::new(0.5).unwrap(),
        )
        .unwrap();
        let map = gaussian_posterior_attacker(&blind).unwrap();
        assert!(map.gain.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn posterior_map_hits_the_oracle() {
        let spec = JointGaussianSpec::new(
            Covariance::diagonal(vec![1.0, 0.5, 2.0, 1.5]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 0.2, 0.0, -0.3], vec![0.0, 0.7, 0.4, 0.1]]).unwrap(),
            NoiseModel::new(0.6).unwrap(),
        )
        .unwrap();
        let x = sample_gaussian(&spec.x_cov, 200_000, 4);
        let enc = NeuralModule::linear(spec.channel.clone());
        let map = gaussian_posterior_attacker(&spec).unwrap();
        let mse = reconstruction_mse(&map, &enc, &spec.noise, &x, 5).unwrap();
        let oracle = minimal_mse_oracle(&spec).unwrap();
        assert!((mse / oracle - 1.0).abs() <= 0.02, "{mse} vs {oracle}");
    }

    fn linear_attack() -> AttackConfig {
        AttackConfig {
            hidden_dims: vec![],
            output: Activation::Identity,
            lr: 0.05,
            epochs: 500,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn invertible_channel_is_inverted() {
        let data = synth_blobs(3, 4, 50, 0.3, 2).unwrap();
        let enc = NeuralModule::linear(Matrix::identity(4));
        let noise = NoiseModel::new(0.0).unwrap();
        let x = data.train_inputs();
        let att = train_attacker(&enc, &noise, &x, &linear_attack()).unwrap();
        let mse = reconstruction_mse(&att, &enc, &noise, &x, 0).unwrap();
        assert!(mse <= 1e-4, "mse {mse}");
    }

    #[test]
    fn constant_encoder_yields_the_mean() {
        let data = synth_blobs(3, 4, 50, 0.3, 2).unwrap();
        let x = data.train_inputs();
        let layer = Dense::new(Matrix::zeros(2, 4), vec![0.3, -0.2], Activation::Identity).unwrap();
        let enc = NeuralModule::from_layers(vec![layer]).unwrap();
        let noise = NoiseModel::new(0.0).unwrap();
        let att = train_attacker(&enc, &noise, &x, &linear_attack()).unwrap();
        let mse = reconstruction_mse(&att, &enc, &noise, &x, 0).unwrap();
        let (n, d) = x.shape();
        let mut var = 0.0;
        for t in 0..d {
            let mean = (0..n).map(|i| x[(i, t)]).sum::<f64>() / n as f64;
            var += (0..n).map(|i| (x[(i, t)] - mean).powi(2)).sum::<f64>() / n as f64;
        }
        var /= d as f64;
        assert!((mse / var - 1.0).abs() <= 0.02, "{mse} vs {var}");
    }

    #[test]
    fn more_training_does_not_hurt() {
        let data = synth_blobs(3, 6, 60, 0.3, 8).unwrap();
        let enc = NeuralModule::dense(&[6, 4], &[Activation::Tanh], 1).unwrap();
        let noise = NoiseModel::new(0.05).unwrap();
        let x = data.train_inputs();
        let short = AttackConfig {
            epochs: 1,
            ..AttackConfig::default()
        };
        let long = AttackConfig::default();
        let a1 = train_attacker(&enc, &noise, &x, &short).unwrap();
        let a50 = train_attacker(&enc, &noise, &x, &long).unwrap();
        let m1 = evaluate_attack(&a1, &enc, &noise, &x, &data.test_inputs(), 3, 0.0).unwrap();
        let m50 = evaluate_attack(&a50, &enc, &noise, &x, &data.test_inputs(), 3, 0.0).unwrap();
        assert!(m50.mse_train <= m1.mse_train);
        assert!(m50.mse_infer <= m1.mse_infer);

        let untrained = init_attacker(4, 6, &long).unwrap();
        let m0 = evaluate_attack(&untrained, &enc, &noise, &x, &data.test_inputs(), 3, 0.0).unwrap();
        assert!(m0.mse_infer >= m50.mse_infer);
    }

    #[test]
    fn attack_is_deterministic_and_label_blind() {
        let data = synth_blobs(3, 5, 40, 0.3, 1).unwrap();
        let enc = NeuralModule::dense(&[5, 3], &[Activation::Tanh], 2).unwrap();
        let noise = NoiseModel::new(0.1).unwrap();
        let cfg = AttackConfig {
            epochs: 5,
            ..AttackConfig::default()
        };
        let a = train_attacker(&enc, &noise, &data.train_inputs(), &cfg).unwrap();
        let b = train_attacker(&enc, &noise, &data.train_inputs(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(train_attacker(&enc, &noise, &data.train_inputs(), &AttackConfig { epochs: 0, ..cfg }).is_err());
    }
}
