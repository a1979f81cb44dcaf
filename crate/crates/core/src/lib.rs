//! Keystroke-dynamics screening toolkit.
//!
//! The crate turns raw press/release logs into four aligned timing channels
//! (hold, flight, press-press, release-release), windows them, and trains
//! binary Parkinson's-vs-control window classifiers under a four-stage
//! protocol: preprocessing, pre-training, fine-tuning and external validation.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the `f64` instantiation that the pipeline uses.

pub mod balance;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod signals;
pub mod synth;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = nn::Tensor<f64>;
pub type Graph = nn::Graph<f64>;
pub type ParameterSet = nn::ParameterSet<f64>;
pub type Model = nn::Model<f64>;
pub type Checkpoint = nn::Checkpoint<f64>;
pub type Window = windowing::Window<f64>;
pub type ChannelStats = windowing::ChannelStats<f64>;
pub type PatientScore = evaluation::PatientScore<f64>;
pub type Dataset = training::Dataset<f64>;

pub type TensorF32 = nn::Tensor<f32>;
pub type ModelF32 = nn::Model<f32>;
