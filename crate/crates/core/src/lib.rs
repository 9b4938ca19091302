//! Domain-generalization training by constrained maximum cross-domain
//! likelihood.
//!
//! A shared feature extractor is trained so that per-domain softmax
//! posteriors agree (cross-domain likelihood) while per-domain feature
//! moments are pulled together (moment matching). Training alternates three
//! stages; see [`trainer`].

mod binio;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{DomainBatch, DomainMoments};
pub use model::{average_classifiers, CmclModel, EmaState, FeatureExtractor, ModelConfig, SoftmaxClassifier};
pub use numerics::{Tape, Tensor, Var};
