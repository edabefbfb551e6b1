//! Traffic speed estimation at sensor-free road segments.
//!
//! Two estimators share one directed sensor graph:
//!
//! * directed Dirichlet-energy feature propagation (DEFP4D), a training-free
//!   iterative solver that fixes measured sensors as boundary values and
//!   relaxes every other node towards the energy minimiser, and
//! * the Dirichlet graph auto-encoder (DGAE), which encodes observed sensors
//!   with dual-direction diffusion convolutions, extends the embeddings to
//!   every node by running the same propagation in latent space, and decodes
//!   speeds for the whole network.
//!
//! The crate also carries the evaluation protocol (MAPE/MAE/RMSE over
//! virtual sensors, average VS-to-AS distance), data loaders, a synthetic
//! corridor generator, and the `dirinet` command-line tool.

pub mod autoencoder;
pub mod cli;
pub mod data;
pub mod diffusion;
mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod propagation;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};

pub use autoencoder::{ModelConfig, ModelParams, SignalWindow};
pub use data::{SpeedSeries, SynthConfig};
pub use diffusion::{Branch, DiffusionKernel};
pub use evaluation::MetricsReport;
pub use graph::{NodePartition, TransitionKind, TransitionMatrix, WeightedDigraph};
pub use propagation::{InitPolicy, PropagationConfig, PropagationMode};
pub use sparse::CsrMatrix;
pub use training::TrainConfig;

/// Number of 5-minute slots in a day.
pub const SLOTS_PER_DAY: usize = 288;

/// Sampling step of every speed series, in seconds.
pub const STEP_SECONDS: i64 = 300;
