//! Self-supervised representation learning with multiple teacher views and
//! two negative-sample queues.
//!
//! A student encoder is trained to match the relation distributions that two
//! momentum (EMA) teachers produce against FIFO queues of past embeddings.
//! The crate bundles everything needed to run that at desk scale: a small
//! reverse-mode tensor library, augmentation policies, encoders, queues, the
//! five objectives, the training loop, KNN and linear-probe evaluation, and
//! the false-negative analysis.

pub mod analysis;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod memory;
pub mod model;
pub mod numcore;
pub mod relation;
pub mod rng;
pub mod trainer;

pub use config::{Method, TrainConfig};
pub use error::{CheckpointError, DataError, Error, Result};
pub use evalkit::{FeatureBank, KnnConfig, ProbeConfig};
pub use image::{ChannelNorm, Image, ImageBatch, Size};
pub use memory::NegativeQueue;
pub use model::{EncoderSpec, Network, TriNetwork};
pub use numcore::{DType, Scalar, Tape, Tensor, Var, Variable};
pub use relation::{RelationDistribution, RelationSource, Temperatures};
pub use rng::SeededRng;
pub use trainer::{StepMetrics, TrainState};
