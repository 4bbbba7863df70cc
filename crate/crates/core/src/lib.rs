//! Decoder-only transformer engine with late multimodal token entry.
//!
//! Multimodal embeddings skip the first `insert_layer` blocks: those blocks
//! run over language tokens only, and the adapter output is spliced into
//! the residual stream at the reserved positions right before block
//! `insert_layer`. The crate also carries the analytical FLOPs model,
//! attention diagnostics, insertion-layer selection and a small grid-QA
//! task for training everything end to end on a CPU.

pub mod analysis;
pub mod error;
mod fsutil;
pub mod insertion;
pub mod modality;
pub mod model;
pub mod numerics;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
