//! Decoder-only transformer: configuration, weights, block forward and the
//! conventional forward in which every token enters at block 0.

mod block;
pub mod checkpoint;
mod config;
mod weights;

pub use block::{AttentionProbs, BlockTape, Capture, LayerCache};
pub(crate) use block::{accumulate, backward_block, run_block, BlockArgs};
pub use config::{ModelConfig, NORM_EPS};
pub use weights::{BlockWeights, Weights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{layer_norm, layer_norm_backward, layer_norm_cached, matmul_at, matmul_bt, Component, Matrix, NormCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Language,
    Multimodal,
}

/// Residual-stream activations for a sequence, with each row's global
/// position and segment.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub activations: Matrix,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl HiddenState {
    pub fn empty(d_model: usize) -> Self {
        Self { activations: Matrix::zeros(0, d_model), positions: Vec::new(), segments: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.activations.rows() != self.positions.len() || self.segments.len() != self.positions.len() {
            return Err(Error::Shape {
                op: "hidden_state",
                detail: format!(
                    "{} rows, {} positions, {} segments",
                    self.activations.rows(),
                    self.positions.len(),
                    self.segments.len()
                ),
            });
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Position("hidden-state positions not strictly increasing".into()));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> HiddenState {
        HiddenState {
            activations: self.activations.select_rows(idx),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            segments: idx.iter().map(|&i| self.segments[i]).collect(),
        }
    }

    /// Indices of rows with the given segment.
    pub fn rows_of(&self, seg: Segment) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.segments[i] == seg).collect()
    }
}

/// Embedding lookup; positions are carried through unchanged.
pub fn embed(cfg: &ModelConfig, w: &Weights, tokens: &[usize], positions: &[usize]) -> Result<HiddenState> {
    if tokens.len() != positions.len() {
        return Err(Error::Shape {
            op: "embed",
            detail: format!("{} tokens, {} positions", tokens.len(), positions.len()),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::InvalidArgument(format!("position {p} beyond max_positions {}", cfg.max_positions)));
    }
    Ok(HiddenState {
        activations: w.embedding.select_rows(tokens),
        positions: positions.to_vec(),
        segments: vec![Segment::Language; tokens.len()],
    })
}

/// One block over `state`. With a cache, keys/values of `state` are
/// appended to it and attention also ranges over the cached rows.
pub fn block_forward(
    cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    state: &HiddenState,
    cache: Option<&mut LayerCache>,
) -> Result<HiddenState> {
    block_forward_captured(cfg, w, layer, state, cache, Capture::None).map(|(s, _)| s)
}

pub fn block_forward_captured(
    cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    state: &HiddenState,
    cache: Option<&mut LayerCache>,
    capture: Capture,
) -> Result<(HiddenState, Option<AttentionProbs>)> {
    if layer >= cfg.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range for {} layers", cfg.n_layers)));
    }
    let bw = &w.blocks[layer];
    let (run, cache) = match cache {
        Some(c) => {
            let run = run_block(
                cfg,
                bw,
                &state.activations,
                &state.positions,
                BlockArgs { past: Some(c), capture, ..Default::default() },
            )?;
            (run, Some(c))
        }
        None => (
            run_block(cfg, bw, &state.activations, &state.positions, BlockArgs { capture, ..Default::default() })?,
            None,
        ),
    };
    if let Some(c) = cache {
        c.append(&state.positions, &run.new_keys, &run.new_values);
    }
    Ok((
        HiddenState { activations: run.out, positions: state.positions.clone(), segments: state.segments.clone() },
        run.probs,
    ))
}

/// Block forward in which the rows flagged in `excluded` neither attend nor
/// are attended to. Used by reference computations that emulate late entry
/// inside a single full-length pass.
pub fn block_forward_excluding(
    cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    state: &HiddenState,
    excluded: &[bool],
) -> Result<HiddenState> {
    let run = run_block(
        cfg,
        &w.blocks[layer],
        &state.activations,
        &state.positions,
        BlockArgs { excluded: Some(excluded), ..Default::default() },
    )?;
    Ok(HiddenState { activations: run.out, positions: state.positions.clone(), segments: state.segments.clone() })
}

/// Final norm followed by the tied LM head, for the listed rows.
pub fn lm_logits(w: &Weights, hidden: &Matrix, rows: &[usize]) -> Result<Matrix> {
    let sel = hidden.select_rows(rows);
    let normed = layer_norm(&sel, w.final_gain.data(), w.final_bias.data(), NORM_EPS)?;
    matmul_bt(&normed, &w.embedding, Component::LmHead)
}

pub(crate) fn lm_logits_cached(w: &Weights, hidden: &Matrix) -> Result<(Matrix, Matrix, NormCache)> {
    let (normed, cache) = layer_norm_cached(hidden, w.final_gain.data(), w.final_bias.data(), NORM_EPS)?;
    let logits = matmul_bt(&normed, &w.embedding, Component::LmHead)?;
    Ok((logits, normed, cache))
}

/// Gradient of the LM head and final norm; returns d(hidden).
pub(crate) fn lm_logits_backward(
    w: &Weights,
    normed: &Matrix,
    cache: &NormCache,
    d_logits: &Matrix,
    grads: &mut Weights,
) -> Result<Matrix> {
    grads.embedding.add_assign(&matmul_at(d_logits, normed, Component::Backward)?);
    let d_normed = crate::numerics::matmul(d_logits, &w.embedding, Component::Backward)?;
    let (d_hidden, dg, db) = layer_norm_backward(&d_normed, w.final_gain.data(), cache);
    accumulate(&mut grads.final_gain, &dg);
    accumulate(&mut grads.final_bias, &db);
    Ok(d_hidden)
}

/// Conventional forward: every row of `input` goes through all blocks.
/// Returns logits for `rows` (indices into `input`).
pub fn baseline_forward(cfg: &ModelConfig, w: &Weights, input: &HiddenState, rows: &[usize]) -> Result<Matrix> {
    input.validate()?;
    if let Some(&p) = input.positions.last() {
        if p >= cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence reaches position {p}, max_positions is {}",
                cfg.max_positions
            )));
        }
    }
    let mut state = input.clone();
    for layer in 0..cfg.n_layers {
        state = block_forward(cfg, w, layer, &state, None)?;
    }
    lm_logits(w, &state.activations, rows)
}

/// [`baseline_forward`] over independent sequences, each at its last row.
pub fn baseline_forward_batch(cfg: &ModelConfig, w: &Weights, batch: &[HiddenState]) -> Result<Vec<Matrix>> {
    batch
        .iter()
        .map(|s| baseline_forward(cfg, w, s, &[s.len().saturating_sub(1)]))
        .collect()
}

#[cfg(test)]
mod tests;
