pub mod captioner;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod fluency;
pub mod guidance;
pub mod metrics;
pub mod neuralnet;
pub mod rng;
pub mod synthgen;
pub mod text;

pub use error::{Error, Result};
