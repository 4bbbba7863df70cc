#![allow(dead_code)]

pub mod reference;

use deepinsert::insertion::PromptLayout;
use deepinsert::model::{
    block_forward_captured, block_forward_excluding, embed, lm_logits, Capture, HiddenState, ModelConfig, Segment, Weights,
};
use deepinsert::modality::{Adapter, GridSample};
use deepinsert::numerics::{Matrix, Rng};
use deepinsert::training::loss_and_grads;

/// Every token in position order, with multimodal rows holding their
/// adapter embeddings, as a single full-length sequence.
fn assemble_full(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout) -> HiddenState {
    let (tokens, positions) = layout.text_tokens();
    let text = embed(cfg, w, &tokens, &positions).unwrap();
    let n_pre = layout.pre_text.len();
    // Assemble by hand in position order.
    let mut acts = Matrix::zeros(0, cfg.d_model);
    let mut pos = Vec::new();
    let mut seg = Vec::new();
    for i in 0..n_pre {
        acts.push_row(text.activations.row(i));
        pos.push(positions[i]);
        seg.push(Segment::Language);
    }
    for (k, p) in layout.mm_range().enumerate() {
        acts.push_row(layout.mm_embeddings.row(k));
        pos.push(p);
        seg.push(Segment::Multimodal);
    }
    for i in n_pre..tokens.len() {
        acts.push_row(text.activations.row(i));
        pos.push(positions[i]);
        seg.push(Segment::Language);
    }
    HiddenState { activations: acts, positions: pos, segments: seg }
}

/// Blocks below the insertion layer: multimodal rows are excluded as
/// queries and keys and reset to their adapter embeddings afterwards.
fn run_shallow(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout, mut state: HiddenState) -> HiddenState {
    let n_pre = layout.pre_text.len();
    let excluded: Vec<bool> = state.segments.iter().map(|s| *s == Segment::Multimodal).collect();
    for layer in 0..cfg.insert_layer {
        state = block_forward_excluding(cfg, w, layer, &state, &excluded).unwrap();
        for (k, row) in (n_pre..n_pre + layout.l_mm()).enumerate() {
            state.activations.row_mut(row).copy_from_slice(layout.mm_embeddings.row(k));
        }
    }
    state
}

/// Full-length reference for late entry: every token is present from block
/// 0, but below the insertion layer multimodal rows are excluded as queries
/// and keys and reset to their adapter embeddings after each block.
pub fn overwrite_and_mask_logits(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout) -> Matrix {
    let mut state = run_shallow(cfg, w, layout, assemble_full(cfg, w, layout));
    for layer in cfg.insert_layer..cfg.n_layers {
        state = block_forward_excluding(cfg, w, layer, &state, &vec![false; state.len()]).unwrap();
    }
    lm_logits(w, &state.activations, &[state.len() - 1]).unwrap()
}

/// Full-length reference for FastV: ranks multimodal rows by brute force
/// from block `start - 1`'s full attention (mean over heads and over every
/// later-position query), then masks the losers out from block `start` on.
pub fn fastv_reference_logits(cfg: &ModelConfig, w: &Weights, layout: &PromptLayout, start: usize, retention: f64) -> Matrix {
    let mut state = run_shallow(cfg, w, layout, assemble_full(cfg, w, layout));
    let mm: Vec<usize> = (0..state.len()).filter(|&i| state.segments[i] == Segment::Multimodal).collect();
    let mut excluded = vec![false; state.len()];
    for layer in cfg.insert_layer..cfg.n_layers {
        if layer == start - 1 {
            let (next, probs) = block_forward_captured(cfg, w, layer, &state, None, Capture::Full).unwrap();
            let probs = probs.unwrap();
            let mut scored: Vec<(usize, f64)> = mm
                .iter()
                .map(|&j| {
                    let mut vals = Vec::new();
                    for h in &probs.heads {
                        for i in (0..state.len()).filter(|&i| state.positions[i] > state.positions[j]) {
                            vals.push(h.get(i, j) as f64);
                        }
                    }
                    (j, vals.iter().sum::<f64>() / vals.len().max(1) as f64)
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let keep = ((retention * mm.len() as f64 - 1e-9).ceil() as usize).clamp(1, mm.len());
            for &(j, _) in &scored[keep..] {
                excluded[j] = true;
            }
            state = next;
        } else {
            state = block_forward_excluding(cfg, w, layer, &state, &excluded).unwrap();
        }
    }
    lm_logits(w, &state.activations, &[state.len() - 1]).unwrap()
}

/// Weights with enlarged entries so activations and gradients are O(1).
pub fn lively_weights(cfg: &ModelConfig, seed: u64, scale: f32) -> Weights {
    let mut rng = Rng::new(seed);
    let mut w = Weights::init(cfg, &mut rng);
    for (name, t) in w.named_mut() {
        if name.contains("gain") {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0 + rng.normal(0.2));
        } else if name.contains("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.2));
        } else {
            t.scale(scale);
        }
    }
    w
}

pub fn random_layout(cfg: &ModelConfig, pre: usize, mm: usize, post: usize, seed: u64) -> PromptLayout {
    let mut rng = Rng::new(seed);
    let mm_rows = Matrix::from_vec(mm, cfg.d_model, (0..mm * cfg.d_model).map(|_| rng.normal(1.0)).collect()).unwrap();
    PromptLayout::new(
        (0..pre).map(|_| rng.below(cfg.vocab_size)).collect(),
        mm_rows,
        (0..post).map(|_| rng.below(cfg.vocab_size)).collect(),
    )
}

pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

fn rel(a: &[f64], b: &[f64]) -> (f64, f64) {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    (if denom < 1e-12 { 0.0 } else { diff / denom }, na)
}

/// Compares the analytic gradient of every trainable tensor, by per-tensor
/// relative L2 error, with Richardson-extrapolated central differences of
/// the double-precision reference loss. Also returns the gap between the
/// reference loss and the library's f32 loss.
pub fn gradient_check(cfg: &ModelConfig, w: &Weights, adapter: &Adapter, features: &Matrix, sample: &GridSample) -> (Vec<GradCheck>, f64) {
    const H: f64 = 1e-4;
    let (loss32, grads) = loss_and_grads(cfg, w, adapter, features, sample).unwrap();
    let base = reference::params(w, adapter);
    let loss_gap = (reference::loss(cfg, &base, features, sample) - loss32 as f64).abs();
    let central = |ti: usize, k: usize, h: f64| -> f64 {
        let at = |delta: f64| {
            let mut p = base.clone();
            p[ti].1.data[k] += delta;
            reference::loss(cfg, &p, features, sample)
        };
        (at(h) - at(-h)) / (2.0 * h)
    };
    let out = grads
        .named()
        .into_iter()
        .enumerate()
        .map(|(ti, (name, g))| {
            assert_eq!(name, base[ti].0);
            let analytic: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
            let numeric: Vec<f64> = (0..analytic.len()).map(|k| (4.0 * central(ti, k, H) - central(ti, k, 2.0 * H)) / 3.0).collect();
            let (rel_error, analytic_norm) = rel(&analytic, &numeric);
            GradCheck { name, rel_error, analytic_norm }
        })
        .collect();
    (out, loss_gap)
}
