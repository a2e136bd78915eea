//! Generative retrieval over hierarchical semantic IDs.

pub mod beam;
pub mod error;
pub mod harness;
pub mod model;
pub mod quantizer;
pub mod router;
pub mod s2d;
pub mod sid_index;
pub mod simulator;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
