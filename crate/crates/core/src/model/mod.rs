//! Encoder-free decoder over semantic IDs.
//!
//! The user context is an embedding + LayerNorm frontend: one slot for the
//! static features and one slot per history action, with no self-attention
//! across history slots. Decoder blocks run causal self-attention over the
//! SID prefix and cross-attend to the context slots; one output head per
//! codebook level turns the last position into token logits.

mod config;
mod decoder;
mod types;

pub use config::ModelConfig;
pub use decoder::{ContextMemory, DecoderModel, ProjectedMemory};
pub use types::{ActionRecord, UserContext, Window};
