//! Joint training of encoder and decoder under the entropy penalty.
//!
//! Per epoch the whole training set is encoded with fresh noise and the
//! mixture is refit from its current means. Per batch the noisy features are
//! assigned to the nearest mean, the mixture weights and then covariances are
//! blended with the batch, and the total loss `L_D + λ L_C` is minimized.

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bounds::{cem_loss, cem_loss_grad, NoiseModel};
use crate::data::Dataset;
use crate::error::{CemError, Result};
use crate::mixture::{assign_nearest, fit_init, GaussianMixture};
use crate::network::{argmax_rows, noise_backward, noise_inject, task_loss, Activation, NeuralModule};
use crate::numerics::{derive_seed, seeded_rng, Matrix};

const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_DECODER_INIT: u64 = 2;
const STREAM_REFIT_NOISE: u64 = 3;
const STREAM_BATCH_NOISE: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;
const STREAM_MIXTURE_INIT: u64 = 6;

/// Baseline obfuscation applied on the task path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    /// The decoder sees clean features.
    None,
    /// The decoder sees the noisy features.
    #[default]
    NoiseOnly,
}

impl FromStr for Defense {
    type Err = CemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Defense::None),
            "noise_only" => Ok(Defense::NoiseOnly),
            other => Err(CemError::UnknownDefense(other.to_string())),
        }
    }
}

impl Defense {
    pub fn as_str(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::NoiseOnly => "noise_only",
        }
    }

    /// Features the decoder consumes.
    pub fn decoder_input<'a>(self, zhat: &'a Matrix, z: &'a Matrix) -> &'a Matrix {
        match self {
            Defense::None => zhat,
            Defense::NoiseOnly => z,
        }
    }

    /// Noise applied to released features once the model is deployed.
    pub fn deployed_noise(self, noise: &NoiseModel) -> NoiseModel {
        match self {
            Defense::None => NoiseModel::new(0.0).expect("zero std is valid"),
            Defense::NoiseOnly => *noise,
        }
    }
}

/// Loss and gradient contributions returned by [`defense_hook`].
#[derive(Debug, Clone, PartialEq)]
pub struct HookOutput {
    pub l_d: f64,
    pub logits_grad: Matrix,
    /// Extra gradient on the released features `z`.
    pub features_grad: Matrix,
}

/// Task loss for a defense. Neither built-in defense adds a term of its own;
/// the difference between them is which features produced `logits`.
pub fn defense_hook(
    kind: Defense,
    _x: &Matrix,
    _zhat: &Matrix,
    z: &Matrix,
    logits: &Matrix,
    labels: &[usize],
) -> Result<HookOutput> {
    let (l_d, logits_grad) = task_loss(logits, labels)?;
    let features_grad = match kind {
        Defense::None | Defense::NoiseOnly => Matrix::zeros(z.rows(), z.cols()),
    };
    Ok(HookOutput {
        l_d,
        logits_grad,
        features_grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub noise_std: f64,
    /// Mixture components; `None` means three per class.
    pub k: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays; `None` means `max(1, epochs / 3)`.
    pub lr_decay_every: Option<usize>,
    pub seed: u64,
    pub defense: Defense,
    pub d_z: usize,
    pub hidden: usize,
    /// Activation on the released features. A bounded one fixes the feature
    /// scale, so the noise level keeps its meaning.
    pub encoder_output: Activation,
    /// Lloyd iterations for the initial fit and each refit.
    pub gmm_iters: usize,
    /// Evaluate accuracy with inference-time noise.
    pub eval_with_noise: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 16.0,
            noise_std: 0.025,
            k: None,
            epochs: 20,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.0,
            lr_decay_factor: 0.5,
            lr_decay_every: None,
            seed: 0,
            defense: Defense::NoiseOnly,
            d_z: 8,
            hidden: 32,
            encoder_output: Activation::Tanh,
            gmm_iters: 10,
            eval_with_noise: true,
        }
    }
}

impl TrainingConfig {
    pub fn k_for(&self, n_classes: usize) -> usize {
        self.k.unwrap_or(3 * n_classes)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let every = self.lr_decay_every.unwrap_or((self.epochs / 3).max(1)).max(1);
        self.lr * self.lr_decay_factor.powi((epoch / every) as i32)
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.noise_std)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CemError::Parse(format!("invalid training config: {what}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite nonnegative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.d_z == 0 || self.hidden == 0 {
            return bad("d_z and hidden must be positive");
        }
        if self.k == Some(0) {
            return bad("k must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite nonnegative number");
        }
        if self.lambda > 0.0 && self.noise()?.std() == 0.0 {
            return bad("lambda > 0 needs noise_std > 0; the penalty is undefined without noise");
        }
        Ok(())
    }
}

/// Epoch averages. `total` is `l_d + lambda * l_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub l_d: f64,
    pub l_c: f64,
    pub total: f64,
    pub accuracy: f64,
}

impl LossBreakdown {
    /// Conditional entropy up to the unknown `H(x)`.
    pub fn rel_cond_entropy(&self) -> f64 {
        -self.l_c
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: NeuralModule,
    pub decoder: NeuralModule,
    pub mixture: GaussianMixture,
    pub history: Vec<LossBreakdown>,
}

pub fn init_models(cfg: &TrainingConfig, d_in: usize, n_classes: usize) -> Result<(NeuralModule, NeuralModule)> {
    let encoder = NeuralModule::dense(
        &[d_in, cfg.hidden, cfg.d_z],
        &[Activation::Relu, cfg.encoder_output],
        derive_seed(cfg.seed, STREAM_ENCODER_INIT, 0),
    )?;
    let decoder = NeuralModule::dense(
        &[cfg.d_z, cfg.hidden, n_classes],
        &[Activation::Relu, Activation::Identity],
        derive_seed(cfg.seed, STREAM_DECODER_INIT, 0),
    )?;
    Ok((encoder, decoder))
}

/// Noisy features of the whole set, drawn from the refit stream.
fn refit_features(
    encoder: &NeuralModule,
    x: &Matrix,
    noise: &NoiseModel,
    seed: u64,
    epoch: usize,
) -> Result<Matrix> {
    let zhat = encoder.predict(x)?;
    Ok(noise_inject(&zhat, noise, derive_seed(seed, STREAM_REFIT_NOISE, epoch as u64)))
}

pub fn train(cfg: &TrainingConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(CemError::DegenerateData("empty training split".into()));
    }
    let x = data.train_inputs();
    let labels = data.train_labels();
    let n = x.rows();
    if cfg.batch_size > n {
        return Err(CemError::DegenerateData(format!(
            "batch size {} exceeds the {n} training samples",
            cfg.batch_size
        )));
    }
    let noise = cfg.noise()?;
    let k = cfg.k_for(data.n_classes);
    let (mut encoder, mut decoder) = init_models(cfg, data.dim(), data.n_classes)?;
    let mix_seed = derive_seed(cfg.seed, STREAM_MIXTURE_INIT, 0);
    // L_C is undefined without noise; a noiseless run trains the task alone.
    let track_mixture = noise.std() > 0.0;

    let mut mix = fit_init(&refit_features(&encoder, &x, &noise, cfg.seed, 0)?, k, mix_seed, cfg.gmm_iters)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            let feats = refit_features(&encoder, &x, &noise, cfg.seed, epoch)?;
            mix = mix.refit(&feats, cfg.gmm_iters)?;
        }
        order.shuffle(&mut seeded_rng(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let lr = cfg.lr_at(epoch);
        let (mut sum_ld, mut sum_lc, mut batches, mut correct) = (0.0, 0.0, 0usize, 0usize);

        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let (zhat, enc_tape) = encoder.forward(&xb)?;
            let z = noise_inject(&zhat, &noise, derive_seed(cfg.seed, STREAM_BATCH_NOISE, step));
            step += 1;
            let (logits, dec_tape) = decoder.forward(cfg.defense.decoder_input(&zhat, &z))?;
            correct += argmax_rows(&logits).iter().zip(&yb).filter(|(p, y)| p == y).count();

            let mut z_grad = Matrix::zeros(z.rows(), z.cols());
            let l_c = if track_mixture {
                let assign = assign_nearest(&z, &mix)?;
                mix = mix.update_weights(&assign)?.update_covariance(&assign, &z)?;
                debug_assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if cfg.lambda > 0.0 {
                    z_grad = cem_loss_grad(&z, &assign, &mix, &noise)?.scale(cfg.lambda);
                }
                cem_loss(&mix, &noise)?
            } else {
                0.0
            };

            let hook = defense_hook(cfg.defense, &xb, &zhat, &z, &logits, &yb)?;
            z_grad.add_assign_scaled(&hook.features_grad, 1.0);
            let (dec_grads, dec_in_grad) = decoder.backward(dec_tape, &hook.logits_grad)?;
            // Both decoder inputs differ from ẑ by additive noise at most.
            let zhat_grad = noise_backward(&z_grad).add(&dec_in_grad);
            let (enc_grads, _) = encoder.backward(enc_tape, &zhat_grad)?;

            if !(hook.l_d.is_finite() && l_c.is_finite()) {
                return Err(CemError::NonFinite(format!("epoch {}: loss diverged", epoch + 1)));
            }
            let tag = |e: CemError| match e {
                CemError::NonFinite(m) => CemError::NonFinite(format!("epoch {}: {m}", epoch + 1)),
                other => other,
            };
            decoder.sgd_step(&dec_grads, lr, cfg.momentum).map_err(tag)?;
            encoder.sgd_step(&enc_grads, lr, cfg.momentum).map_err(tag)?;

            sum_ld += hook.l_d;
            sum_lc += l_c;
            batches += 1;
        }

        let l_d = sum_ld / batches as f64;
        let l_c = sum_lc / batches as f64;
        history.push(LossBreakdown {
            epoch: epoch + 1,
            l_d,
            l_c,
            total: l_d + cfg.lambda * l_c,
            accuracy: correct as f64 / n as f64,
        });
    }

    Ok(TrainOutcome {
        encoder,
        decoder,
        mixture: mix,
        history,
    })
}

/// `L_C` of a trained encoder: its noisy features on `inputs` are refit from
/// the mixture's means and the bound is evaluated on the result. Less noisy
/// than the last epoch's batch average, which mixes parameter states.
pub fn final_cem_loss(
    encoder: &NeuralModule,
    mixture: &GaussianMixture,
    inputs: &Matrix,
    noise: &NoiseModel,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let feats = noise_inject(&encoder.predict(inputs)?, noise, seed);
    cem_loss(&mixture.refit(&feats, iters)?, noise)
}

/// Top-1 accuracy of the split model, with `noise` on the released features.
pub fn evaluate_utility(
    encoder: &NeuralModule,
    decoder: &NeuralModule,
    inputs: &Matrix,
    labels: &[usize],
    noise: &NoiseModel,
    seed: u64,
) -> Result<f64> {
    if inputs.rows() != labels.len() {
        return Err(CemError::ShapeMismatch(format!(
            "{} inputs for {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let z = noise_inject(&encoder.predict(inputs)?, noise, seed);
    let pred = argmax_rows(&decoder.predict(&z)?);
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}
