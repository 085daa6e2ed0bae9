//! Prior-data fitted networks (PFNs) with decoupled-value attention.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense fp64 tensors, a reverse-mode tape, Cholesky and seeded RNG
//! * [`priors`]: synthetic regression datasets drawn from GP priors
//! * [`bardist`]: bucketized (bar) predictive distributions
//! * [`attention`]: vanilla, decoupled-value, RBF-kernel and linear attention rules
//! * [`backbones`]: Transformer and CNN PFN models plus checkpoints
//! * [`training`]: the meta-training loop
//! * [`gp`]: exact GP regression baseline
//! * [`powerflow`]: radial feeder backward/forward sweep and load datasets
//! * [`evaluation`]: metrics, sweeps, coverage, post-hoc filters, timing

pub mod attention;
pub mod backbones;
pub mod bardist;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod numerics;
pub mod powerflow;
pub mod priors;
pub mod training;

pub use error::{Error, Result};
pub use attention::{AttentionKind, AttentionSpec};
pub use backbones::{build_model, Backbone, ModelSpec, PFNModel};
pub use bardist::{BarDistribution, BucketSpec};
pub use evaluation::{Metrics, PostHocFilter, Predictor};
pub use gp::{GPHyper, GPPosterior};
pub use numerics::{SeededRng, Tensor};
pub use powerflow::{LoadScenario, PFSolution, RadialNetwork};
pub use priors::{PriorConfig, SyntheticDataset};
pub use training::{TrainConfig, TrainLog};
