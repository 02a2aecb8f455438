//! Multiscale convolutional patch classifier for tumor segmentation and
//! slice-level tumor type classification.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod seed;
pub mod segment;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{CheckpointError, Error, RecordError, Result};
pub use net::{Network, NetworkConfig};
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, TrainHistory};
