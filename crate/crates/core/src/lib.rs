//! Convolutional spatial transformer networks for weakly supervised object
//! localization.

pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pyramid;
pub mod stn;
pub mod wsol;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{Dataset, DatasetSpec, Split, WeakSample};
pub use geometry::{BoxXYXY, ScoredBox};
pub use metrics::{EvalRecord, HistogramReport, MetricsReport};
pub use pyramid::{LevelSelect, Model, ModelConfig};
pub use train::{EpochLog, Trainer};
