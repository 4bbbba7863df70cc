//! Late-entry inference.
//!
//! Prefill runs in two phases. Blocks `0..insert_layer` see only the
//! language tokens (at their reserved global positions) and fill the
//! shallow cache region. The adapter output is then spliced into the
//! residual stream at the multimodal slot and blocks `insert_layer..`
//! run causally over the combined sequence, filling the deep region.
//! No attention score involving a multimodal position is ever computed
//! below the insertion layer.

mod cache;
mod layout;
mod prune;

pub use cache::SplitKVCache;
pub use layout::{segment_prompt, PromptLayout};
pub(crate) use layout::splice;
pub use prune::{fastv_keep_rows, fastv_scores, retained_count, select_top, PruneConfig};

use crate::error::{Error, Result};
use crate::model::{
    block_forward_captured, embed, lm_logits, AttentionProbs, Capture, HiddenState, ModelConfig, Segment, Weights,
};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, Default)]
pub struct PrefillOptions {
    pub prune: PruneConfig,
    /// Attention rows to keep per block.
    pub capture: Capture,
    /// Keep the last row of every block's output.
    pub record_layer_outputs: bool,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    /// Logits of the last prompt token, `1 × vocab`.
    pub logits: Matrix,
    pub cache: SplitKVCache,
    /// Per block; `None` unless capture was requested.
    pub attention: Vec<Option<AttentionProbs>>,
    /// Last-row output of each block when requested.
    pub layer_outputs: Vec<Vec<f32>>,
    /// Rows present after the last block.
    pub final_positions: Vec<usize>,
    pub final_segments: Vec<Segment>,
}

pub fn deepinsert_prefill(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout) -> Result<Prefill> {
    prefill_with(cfg, w, layout, PrefillOptions::default())
}

pub fn prefill_with(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout, opts: PrefillOptions) -> Result<Prefill> {
    cfg.validate()?;
    layout.check(cfg)?;
    opts.prune.validate(cfg)?;
    let mut cache = SplitKVCache::new(cfg, layout.mm_range(), layout.l_text());
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut layer_outputs = Vec::new();

    // Phase 1: language tokens only.
    let mut text = layout.embed_text(cfg, w)?;
    for layer in 0..cfg.insert_layer {
        let (next, probs) =
            block_forward_captured(cfg, w, layer, &text, Some(cache.layer_mut(layer)), opts.capture)?;
        text = next;
        attention.push(probs);
        if opts.record_layer_outputs {
            layer_outputs.push(text.activations.row(text.len().saturating_sub(1)).to_vec());
        }
    }

    // Phase 2: adapter output enters raw at the reserved slot.
    let mut state = splice(layout, &text, cfg.d_model);
    for layer in cfg.insert_layer..cfg.n_layers {
        match opts.prune {
            PruneConfig::Vtw { exit_layer } if layer == exit_layer => {
                state = state.select(&state.rows_of(Segment::Language));
            }
            PruneConfig::Fastv { start_layer, retention } if layer == start_layer => {
                let probs = attention[layer - 1]
                    .as_ref()
                    .filter(|p| p.query_positions.len() == state.len())
                    .expect("full attention captured for the ranking block");
                let keep = fastv_keep_rows(&state, probs, retention);
                state = state.select(&keep);
            }
            _ => {}
        }
        let capture = match opts.prune {
            PruneConfig::Fastv { start_layer, .. } if layer + 1 == start_layer => Capture::Full,
            _ => opts.capture,
        };
        let (next, probs) = block_forward_captured(cfg, w, layer, &state, Some(cache.layer_mut(layer)), capture)?;
        state = next;
        attention.push(probs);
        if opts.record_layer_outputs {
            layer_outputs.push(state.activations.row(state.len().saturating_sub(1)).to_vec());
        }
    }

    let last = state.len().checked_sub(1).ok_or_else(|| Error::InvalidArgument("empty prompt".into()))?;
    let logits = lm_logits(w, &state.activations, &[last])?;
    Ok(Prefill {
        logits,
        cache,
        attention,
        layer_outputs,
        final_positions: state.positions,
        final_segments: state.segments,
    })
}

/// Feeds one token through all blocks at the cache's next position.
pub fn decode_step(cfg: &ModelConfig, w: &Weights, cache: &mut SplitKVCache, token: usize) -> Result<Matrix> {
    let pos = cache.next_position();
    decode_step_at(cfg, w, cache, token, pos, Capture::None).map(|(l, _)| l)
}

/// [`decode_step`] with an explicit position (which must equal the cache's
/// next position) and optional attention capture.
pub fn decode_step_at(
    cfg: &ModelConfig,
    w: &Weights,
    cache: &mut SplitKVCache,
    token: usize,
    position: usize,
    capture: Capture,
) -> Result<(Matrix, Vec<Option<AttentionProbs>>)> {
    if position != cache.next_position() {
        return Err(Error::Position(format!(
            "decode position {position} but cache expects {}",
            cache.next_position()
        )));
    }
    if cache.n_layers() != cfg.n_layers || cache.insert_layer() != cfg.insert_layer {
        return Err(Error::InvalidArgument("cache was built for a different model config".into()));
    }
    let mut state = embed(cfg, w, &[token], &[position])?;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let (next, probs) = block_forward_captured(cfg, w, layer, &state, Some(cache.layer_mut(layer)), capture)?;
        state = next;
        attention.push(probs);
    }
    cache.advance();
    Ok((lm_logits(w, &state.activations, &[0])?, attention))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The stop token, when produced, ends the sequence and is
/// included in it.
pub fn generate(
    cfg: &ModelConfig,
    w: &Weights,
    layout: &PromptLayout,
    max_new_tokens: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if max_new_tokens == 0 {
        return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
    }
    let prefill = deepinsert_prefill(cfg, w, layout)?;
    let mut cache = prefill.cache;
    let mut out = vec![argmax(prefill.logits.row(0))];
    while out.len() < max_new_tokens && Some(*out.last().unwrap()) != stop {
        if cache.next_position() >= cfg.max_positions {
            break;
        }
        let logits = decode_step(cfg, w, &mut cache, *out.last().unwrap())?;
        out.push(argmax(logits.row(0)));
    }
    Ok(out)
}

/// Conventional forward over the assembled prompt, last-token logits.
pub fn baseline_prefill_logits(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout) -> Result<Matrix> {
    let state = layout.assemble(cfg, w)?;
    crate::model::baseline_forward(cfg, w, &state, &[state.len() - 1])
}

/// Greedy decoding with a full recompute per step and no cache, every
/// token entering at block 0.
pub fn baseline_generate(
    cfg: &ModelConfig,
    w: &Weights,
    layout: &PromptLayout,
    max_new_tokens: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    let mut seq: HiddenState = layout.assemble(cfg, w)?;
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let logits = crate::model::baseline_forward(cfg, w, &seq, &[seq.len() - 1])?;
        let t = argmax(logits.row(0));
        out.push(t);
        if Some(t) == stop || seq.len() >= cfg.max_positions {
            break;
        }
        let next = embed(cfg, w, &[t], &[seq.len()])?;
        seq = HiddenState {
            activations: seq.activations.vstack(&next.activations)?,
            positions: seq.positions.iter().copied().chain([seq.len()]).collect(),
            segments: seq.segments.iter().copied().chain([Segment::Language]).collect(),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
