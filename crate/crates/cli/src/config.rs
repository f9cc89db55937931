use std::fs;
use std::path::{Path, PathBuf};

use cem_core::{Activation, AttackConfig, Defense, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

/// Noise variances swept by default.
pub const DEFAULT_GRID: [f64; 6] = [0.01, 0.025, 0.05, 0.1, 0.2, 0.3];

/// Flat run configuration. Every key is optional in the file; flags given on
/// the command line override file values, which override these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// `label,v1,...,vd` file. When absent a synthetic blob world is built
    /// from the fields below.
    pub data_csv: Option<PathBuf>,
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub data_seed: u64,

    pub lambda: f64,
    pub noise_std: f64,
    pub k: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: Option<usize>,
    pub seed: u64,
    pub defense: Defense,
    pub d_z: usize,
    pub hidden: usize,
    pub encoder_output: Activation,
    pub gmm_iters: usize,
    pub eval_with_noise: bool,

    pub attack_epochs: usize,
    pub attack_lr: f64,
    pub attack_momentum: f64,
    pub attack_batch_size: usize,
    pub attack_hidden: Vec<usize>,
    pub attack_output: Activation,
    /// Defaults to `seed`.
    pub attack_seed: Option<u64>,

    /// Noise variances for `sweep`.
    pub grid: Vec<f64>,
    /// Seeds averaged per grid point.
    pub replicates: usize,

    /// Estimate of `H(x)` added to the relative conditional entropy when
    /// reporting the MSE floor.
    pub h_x_offset: f64,
}

impl Default for LabConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        let a = AttackConfig::default();
        Self {
            data_csv: None,
            n_classes: 3,
            dim: 16,
            per_class: 2000,
            spread: 0.1,
            data_seed: 0,
            lambda: t.lambda,
            noise_std: t.noise_std,
            k: t.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            seed: t.seed,
            defense: t.defense,
            d_z: t.d_z,
            hidden: t.hidden,
            encoder_output: t.encoder_output,
            gmm_iters: t.gmm_iters,
            eval_with_noise: t.eval_with_noise,
            attack_epochs: a.epochs,
            attack_lr: a.lr,
            attack_momentum: a.momentum,
            attack_batch_size: a.batch_size,
            attack_hidden: a.hidden_dims,
            attack_output: a.output,
            attack_seed: None,
            grid: DEFAULT_GRID.to_vec(),
            replicates: 5,
            h_x_offset: 0.0,
        }
    }
}

impl LabConfig {
    /// Read a JSON config. A missing or malformed file is a configuration
    /// error naming the path.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| LabError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            LabError::Usage(message) => LabError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            lambda: self.lambda,
            noise_std: self.noise_std,
            k: self.k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            seed: self.seed,
            defense: self.defense,
            d_z: self.d_z,
            hidden: self.hidden,
            encoder_output: self.encoder_output,
            gmm_iters: self.gmm_iters,
            eval_with_noise: self.eval_with_noise,
        }
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            epochs: self.attack_epochs,
            lr: self.attack_lr,
            momentum: self.attack_momentum,
            batch_size: self.attack_batch_size,
            hidden_dims: self.attack_hidden.clone(),
            output: self.attack_output,
            seed: self.attack_seed.unwrap_or(self.seed),
        }
    }

    /// Checks that do not need the data. Failures are usage errors.
    pub fn validate(&self) -> Result<()> {
        self.training()
            .validate()
            .map_err(|e| LabError::Usage(e.to_string()))?;
        if self.attack_epochs == 0 || self.attack_batch_size == 0 {
            return Err(LabError::Usage(
                "attack_epochs and attack_batch_size must be positive".into(),
            ));
        }
        if self.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LabError::Usage("grid variances must be finite and nonnegative".into()));
        }
        if self.replicates == 0 {
            return Err(LabError::Usage("replicates must be positive".into()));
        }
        Ok(())
    }
}

/// Parse `--grid 0.01,0.1,0.3`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| LabError::Usage(format!("grid value `{s}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(LabError::Usage("grid must not be empty".into()));
    }
    Ok(grid)
}
