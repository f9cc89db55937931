//! Conditional-entropy-maximization defense for split inference.
//!
//! An encoder on the client maps inputs to features, Gaussian noise is added,
//! and a decoder on the server finishes the task. Training adds a penalty
//! that upper-bounds the mutual information between the released features
//! and the inputs, estimated through a streaming Gaussian mixture over the
//! features. An adversary then tries to invert the released features.

pub mod adversary;
pub mod bounds;
pub mod data;
pub mod error;
pub mod mixture;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use adversary::{
    evaluate_attack, gaussian_posterior_attacker, train_attacker, AttackConfig, AttackReport,
    PosteriorMeanMap, Reconstructor,
};
pub use bounds::{
    cem_loss, cem_loss_grad, cond_entropy_lower, gaussian_entropy, mi_upper_bound,
    minimal_mse_oracle, mixture_entropy_upper, mse_floor, BoundsReport, JointGaussianSpec,
    NoiseModel,
};
pub use data::{load_csv, synth_blobs, Dataset};
pub use error::{CemError, Result};
pub use mixture::{assign_nearest, fit_init, BatchAssignment, GaussianComponent, GaussianMixture};
pub use network::{noise_inject, task_loss, Activation, NeuralModule, TapePass};
pub use numerics::{Covariance, Matrix};
pub use trainer::{
    defense_hook, evaluate_utility, final_cem_loss, train, Defense, LossBreakdown, TrainOutcome,
    TrainingConfig,
};
