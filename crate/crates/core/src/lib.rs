//! Desk-scale numerical laboratory for score-based diffusion models.
//!
//! The crate implements the full pipeline — forward Ornstein-Uhlenbeck
//! noising, score-model families with exact parameter gradients, denoising
//! score-matching losses, clipped SGD with weight decay, backward samplers,
//! score-stability estimation on adjacent datasets, and the reflection
//! coupling contraction testbed — together with a deterministic experiment
//! runner (`scorelab` binary) that emits JSON reports and CSV data files.
//!
//! Every operation is a pure function of its inputs and a 64-bit seed;
//! replicated runs are bitwise reproducible, serial or parallel.

pub mod coupling;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod losses;
pub mod process;
pub mod rng;
pub mod sampling;
pub mod scores;
pub mod stability;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use process::{
    build_step_grid, discrete_weighting, kernel_coeffs, sample_forward, sample_time,
    KernelCoeffs, Schedule, StepGrid, TimeWeighting,
};
pub use scores::{log_softmax_posterior, Activation, Dataset, Feature, FeatureBasis, ScoreModel};
