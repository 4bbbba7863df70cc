//! Synthetic grid question answering: a `G × G` grid of symbols is the
//! non-text input, seen through a frozen encoder and a trainable adapter.

mod encoder;
pub mod io;
mod task;

pub use encoder::{Adapter, AdapterTape, FrozenEncoder, ENCODER_SEED};
pub use task::{
    cell_question, generate_dataset, row_question, unique_mode, Dataset, DatasetConfig, GridSample, GridTask,
    QueryType, BOS, IMG, PAD, Q_CELL, Q_ROW,
};

use crate::error::Result;
use crate::insertion::{segment_prompt, PromptLayout};

/// Encoder features → adapter → prompt layout for one sample.
pub fn sample_layout(enc: &FrozenEncoder, adapter: &Adapter, sample: &GridSample) -> Result<PromptLayout> {
    let mm = adapter.adapt(&enc.encode(sample))?;
    segment_prompt(&sample.question_tokens, IMG, mm, adapter.d_model())
}
