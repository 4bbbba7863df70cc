use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::insertion::{argmax, decode_step_at, prefill_with, PrefillOptions, PromptLayout};
use crate::model::{AttentionProbs, Capture, ModelConfig, Segment, Weights};
use crate::numerics::Matrix;

/// Attention of one designated query token, for every block and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Global position of the query token.
    pub query_position: usize,
    /// Positions of the multimodal slot.
    pub mm_positions: Range<usize>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub key_positions: Vec<usize>,
    pub key_segments: Vec<Segment>,
    /// One row per head over `key_positions`.
    pub heads: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every row must be a distribution (within 1e-6).
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.key_positions.len() != layer.key_segments.len() {
                return Err(invalid(format!("layer {l}: positions and segment tags differ in length")));
            }
            for (h, row) in layer.heads.iter().enumerate() {
                if row.len() != layer.key_positions.len() {
                    return Err(invalid(format!("layer {l} head {h}: row length mismatch")));
                }
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(invalid(format!("layer {l} head {h}: row sums to {s}, not 1")));
                }
            }
        }
        Ok(())
    }
}

fn layer_trace(probs: &AttentionProbs, layout: &PromptLayout) -> LayerTrace {
    let key_segments = probs.key_positions.iter().map(|&p| layout.segment_at(p)).collect();
    let last = probs.query_positions.len() - 1;
    LayerTrace {
        key_positions: probs.key_positions.clone(),
        key_segments,
        heads: probs.heads.iter().map(|h| h.row(last.min(h.rows() - 1)).to_vec()).collect(),
    }
}

fn collect(
    attention: &[Option<AttentionProbs>],
    layout: &PromptLayout,
    query_position: usize,
) -> Result<AttentionTrace> {
    let layers = attention
        .iter()
        .map(|p| p.as_ref().map(|p| layer_trace(p, layout)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidArgument("attention was not captured for every block".into()))?;
    Ok(AttentionTrace { query_position, mm_positions: layout.mm_range(), layers })
}

/// Trace at the last prompt token. Returns the prompt logits alongside.
pub fn trace_last_prompt_token(
    cfg: &ModelConfig,
    w: &Weights,
    layout: &PromptLayout,
) -> Result<(AttentionTrace, Vec<f32>)> {
    let opts = PrefillOptions { capture: Capture::LastRow, ..Default::default() };
    let p = prefill_with(cfg, w, layout, opts)?;
    let trace = collect(&p.attention, layout, layout.total_len() - 1)?;
    Ok((trace, p.logits.row(0).to_vec()))
}

/// Trace at the first generated token, fed back at the next position.
pub fn trace_first_answer_token(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout) -> Result<AttentionTrace> {
    let mut p = prefill_with(cfg, w, layout, PrefillOptions::default())?;
    let token = argmax(p.logits.row(0));
    let pos = p.cache.next_position();
    let (_, attention) = decode_step_at(cfg, w, &mut p.cache, token, pos, Capture::LastRow)?;
    collect(&attention, layout, pos)
}

/// Per block: attention mass on multimodal keys summed over heads, divided
/// by the head count.
pub fn var_per_layer(trace: &AttentionTrace) -> Vec<f64> {
    trace
        .layers
        .iter()
        .map(|layer| {
            if layer.heads.is_empty() {
                return 0.0;
            }
            let mass: f64 = layer
                .heads
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&layer.key_segments)
                        .filter(|(_, s)| **s == Segment::Multimodal)
                        .map(|(&v, _)| v as f64)
                        .sum::<f64>()
                })
                .sum();
            (mass / layer.heads.len() as f64).clamp(0.0, 1.0)
        })
        .collect()
}

/// Mean of [`var_per_layer`] over traces.
pub fn mean_var_per_layer(traces: &[AttentionTrace]) -> Result<Vec<f64>> {
    let first = traces.first().ok_or_else(|| invalid("no traces"))?;
    let mut acc = vec![0.0; first.n_layers()];
    for t in traces {
        if t.n_layers() != acc.len() {
            return Err(invalid("traces have different block counts"));
        }
        for (a, v) in acc.iter_mut().zip(var_per_layer(t)) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / traces.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap {
    /// `layers × L_mm`; each column with positive mass sums to 1.
    pub scores: Matrix,
    pub heads_used: usize,
    pub warnings: Vec<String>,
}

/// Layer × multimodal-token contribution.
///
/// Per block and token: mean of the `top_k` largest per-head weights on that
/// token, averaged over traces. Blocks below `exclude_first` are zeroed.
/// Each token's column is then normalized over blocks.
pub fn token_contribution_map(traces: &[AttentionTrace], top_k: usize, exclude_first: usize) -> Result<ContributionMap> {
    let first = traces.first().ok_or_else(|| invalid("no traces"))?;
    let n_layers = first.n_layers();
    let mm = first.mm_positions.clone();
    let l_mm = mm.len();
    let mut warnings = Vec::new();
    let mut raw = Matrix::zeros(n_layers, l_mm);
    let mut heads_used = top_k;
    for t in traces {
        if t.n_layers() != n_layers || t.mm_positions != mm {
            return Err(invalid("traces disagree on block count or multimodal slot"));
        }
        for (l, layer) in t.layers.iter().enumerate() {
            let n_heads = layer.heads.len();
            let k = top_k.min(n_heads);
            if k < top_k && warnings.is_empty() {
                warnings.push(format!("only {n_heads} heads per block; averaging all of them instead of top {top_k}"));
                log::warn!("{}", warnings[0]);
            }
            heads_used = heads_used.min(k);
            if l < exclude_first || k == 0 {
                continue;
            }
            for (i, &pos) in layer.key_positions.iter().enumerate() {
                if !mm.contains(&pos) {
                    continue;
                }
                let mut per_head: Vec<f32> = layer.heads.iter().map(|r| r[i]).collect();
                per_head.sort_by(|a, b| b.total_cmp(a));
                let mean = per_head[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64;
                let j = pos - mm.start;
                raw.set(l, j, raw.get(l, j) + mean as f32);
            }
        }
    }
    for j in 0..l_mm {
        let total: f64 = (0..n_layers).map(|l| raw.get(l, j) as f64).sum();
        if total > 0.0 {
            for l in 0..n_layers {
                raw.set(l, j, (raw.get(l, j) as f64 / total) as f32);
            }
        }
    }
    Ok(ContributionMap { scores: raw, heads_used, warnings })
}
