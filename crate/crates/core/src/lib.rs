//! Semantic matching and aggregation network for few-shot and generalized
//! few-shot intent detection.

pub mod classifier;
pub mod corpus;
pub mod diffcore;
pub mod embeddings;
pub mod encoder;
pub mod episodes;
pub mod evaluation;
mod error;
pub mod lstm;
pub mod matching;
pub mod model;
pub mod regularizers;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
