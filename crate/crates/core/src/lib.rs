//! Multimodal neural posterior estimation.
//!
//! Attention-based summary networks embed each data source, a fusion
//! strategy combines the embeddings, and a conditional coupling flow models
//! the posterior. Everything runs on a small reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod simulators;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Standardizer};
pub use error::{Error, Result};
pub use flow::{CouplingFlow, DensityEstimator, FlowConfig};
pub use fusion::{Architecture, FusionConfig, FusionNetwork, MissingnessMask};
pub use metrics::{MetricsReport, Spread};
pub use model::{NetworkConfig, PosteriorModel};
pub use simulators::{GaussianPosterior, Task};
pub use tensor::Tensor;
pub use train::{EpochRecord, TrainConfig, Trainer};
