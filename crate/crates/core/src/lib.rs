//! Feature-learning dynamics of two-layer quadratic networks trained as a
//! DDPM denoiser or as a logistic classifier on two-patch data.
//!
//! The usual entry points are [`generate_dataset`], [`init_denoiser`] /
//! [`init_classifier`], [`train_denoiser`] / [`train_classifier`] and the
//! metrics in [`analysis`]. [`harness`] wires these into file-producing runs.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod mnist;
pub mod models;
pub mod objectives;
pub mod plot;
pub mod rng;
pub mod trainer;

pub use analysis::{
    classifier_metrics, decompose_weight, denoiser_metrics, phase_classify, Decomposition, FeatureMetrics,
    Observable, Phase, PhaseThresholds,
};
pub use config::{DataSpec, ExperimentSpec, ModelKind, SweepSpec};
pub use data::{generate_dataset, generate_test_set, DataSource, Dataset, Sample, SignalPair, SyntheticConfig};
pub use error::{Error, Result};
pub use harness::{run_experiment, run_sweep, RunSummary, SweepRow};
pub use mnist::{NoisyMnistConfig, PixelScaling};
pub use models::{
    init_classifier, init_denoiser, ClassifierParams, DenoiserParams, GradBundle, InitConfig, ParamSet,
};
pub use objectives::{
    classification_loss, classification_loss_grad, ddpm_expected_loss, ddpm_expected_loss_grad, make_schedule,
    NoiseSchedule,
};
pub use trainer::{train_classifier, train_denoiser, Objective, StopReason, TrainConfig, Trajectory, TrajectoryRecord};
