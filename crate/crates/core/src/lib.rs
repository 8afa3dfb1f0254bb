//! Restricted Boltzmann machines, deep belief networks, and classification
//! strategies that couple DBN pretraining with supervised fine-tuning.

pub mod checkpoint;
pub mod checks;
pub mod classifier;
pub mod data;
pub mod dbn;
pub mod error;
pub mod experiment;
pub mod history;
pub mod hyper;
pub mod numerics;
pub mod oracle;
pub mod rbm;
pub mod strategies;

pub use classifier::{ClassifierParams, LabeledDataset, Network, NetworkGrad};
pub use dbn::{DbnParams, PretrainOutcome};
pub use error::{Error, Result};
pub use history::{EpochRecord, RunHistory};
pub use hyper::{ExpectedLossEstimator, HvpMode, Hyper, Schedule};
pub use numerics::{Matrix, RngStream};
pub use rbm::{RbmGrad, RbmParams};
pub use strategies::{StrategyId, TrainOutcome, TrainedModel};
