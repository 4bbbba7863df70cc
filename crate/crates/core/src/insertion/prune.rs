use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{AttentionProbs, HiddenState, ModelConfig, Segment};

/// Token-pruning composed with late insertion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PruneConfig {
    #[default]
    None,
    /// Blocks `start_layer..` see only the `ceil(retention · L_mm)` multimodal
    /// tokens that received the most attention in block `start_layer - 1`.
    Fastv { start_layer: usize, retention: f64 },
    /// Multimodal tokens leave the sequence before block `exit_layer`.
    Vtw { exit_layer: usize },
}

impl PruneConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        match *self {
            PruneConfig::None => Ok(()),
            PruneConfig::Fastv { start_layer, retention } => {
                if !(retention > 0.0 && retention <= 1.0) {
                    return Err(invalid(format!("fastv retention {retention} outside (0, 1]")));
                }
                if start_layer <= cfg.insert_layer || start_layer > cfg.n_layers {
                    return Err(invalid(format!(
                        "fastv start layer {start_layer} must lie in ({}, {}]: ranking needs a block that saw the multimodal tokens",
                        cfg.insert_layer, cfg.n_layers
                    )));
                }
                Ok(())
            }
            PruneConfig::Vtw { exit_layer } => {
                if exit_layer < cfg.insert_layer || exit_layer > cfg.n_layers {
                    return Err(invalid(format!(
                        "vtw exit layer {exit_layer} outside [{}, {}]: tokens cannot exit before they enter",
                        cfg.insert_layer, cfg.n_layers
                    )));
                }
                Ok(())
            }
        }
    }

    /// Multimodal tokens each block processes, given `l_mm` inserted.
    pub fn mm_tokens_at(&self, cfg: &ModelConfig, layer: usize, l_mm: usize) -> usize {
        if layer < cfg.insert_layer {
            return 0;
        }
        match *self {
            PruneConfig::None => l_mm,
            PruneConfig::Fastv { start_layer, retention } => {
                if layer >= start_layer {
                    retained_count(l_mm, retention)
                } else {
                    l_mm
                }
            }
            PruneConfig::Vtw { exit_layer } => {
                if layer >= exit_layer {
                    0
                } else {
                    l_mm
                }
            }
        }
    }
}

/// `ceil(retention · l_mm)`, at least one when any token exists.
pub fn retained_count(l_mm: usize, retention: f64) -> usize {
    if l_mm == 0 {
        return 0;
    }
    // Round away float noise such as 0.25 * 576 = 144.00000000000003.
    let raw = retention * l_mm as f64;
    let snapped = (raw * 1e9).round() / 1e9;
    (snapped.ceil() as usize).clamp(1, l_mm)
}

/// Importance of each multimodal row: attention it receives from every
/// later-position query, averaged over queries and heads.
pub fn fastv_scores(state: &HiddenState, probs: &AttentionProbs) -> Vec<(usize, f64)> {
    let mm_rows = state.rows_of(Segment::Multimodal);
    let n_past = probs.key_positions.len() - probs.query_positions.len();
    mm_rows
        .into_iter()
        .map(|row| {
            let key = n_past + row;
            let pos = probs.key_positions[key];
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for head in &probs.heads {
                for (qi, &qpos) in probs.query_positions.iter().enumerate() {
                    if qpos > pos {
                        sum += head.get(qi, key) as f64;
                        n += 1;
                    }
                }
            }
            (row, if n == 0 { 0.0 } else { sum / n as f64 })
        })
        .collect()
}

/// Top-`keep` rows by score, ties to the lower row, returned in row order.
pub fn select_top(scores: &[(usize, f64)], keep: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = ranked.into_iter().take(keep).map(|(r, _)| r).collect();
    kept.sort_unstable();
    kept
}

/// Rows of `state` surviving FastV pruning.
pub fn fastv_keep_rows(state: &HiddenState, probs: &AttentionProbs, retention: f64) -> Vec<usize> {
    let scores = fastv_scores(state, probs);
    let keep = retained_count(scores.len(), retention);
    let kept_mm = select_top(&scores, keep);
    (0..state.len())
        .filter(|&i| state.segments[i] == Segment::Language || kept_mm.binary_search(&i).is_ok())
        .collect()
}
