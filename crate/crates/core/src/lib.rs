//! Entropy-gated interactive bandit training for attention encoder-decoder
//! translation models.
//!
//! The core is generic over the float type; the aliases below fix it to
//! `f64` (and `f32` where a smaller footprint is wanted).

pub mod biploop;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod feedback;
pub mod gate;
pub mod metrics;
pub mod rlcore;
pub mod scalar;
pub mod seqmodel;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ActorParams = seqmodel::ModelParams<f64>;
pub type CriticParams = seqmodel::ModelParams<f64>;
pub type Gradients = seqmodel::Gradients<f64>;
pub type Distribution = seqmodel::Distribution<f64>;
pub type AdamState = rlcore::AdamState<f64>;
pub type Learner = biploop::Learner<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type Matrix = tensor::Matrix<f64>;

pub type ActorParamsF32 = seqmodel::ModelParams<f32>;
pub type LearnerF32 = biploop::Learner<f32>;
pub type CheckpointF32 = checkpoint::Checkpoint<f32>;
