//! Learning multi-class classifiers from complementary labels.

pub mod baselines;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod risk;
pub mod scalar;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{BinaryLoss, ComplementaryLoss, Loss, LossKind};
pub use model::{Dims, Model, ModelKind};
pub use risk::{ClassPartitionedSample, PriorMode, RiskReport, RiskVariant};
pub use scalar::Scalar;
pub use trainer::{Estimator, TrainerConfig};

pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type OrdinaryDataset64 = data::OrdinaryDataset<f64>;
pub type OrdinaryDataset32 = data::OrdinaryDataset<f32>;
pub type ComplementaryDataset64 = data::ComplementaryDataset<f64>;
pub type ComplementaryDataset32 = data::ComplementaryDataset<f32>;
pub type Sample64 = ClassPartitionedSample<f64>;
pub type Sample32 = ClassPartitionedSample<f32>;
