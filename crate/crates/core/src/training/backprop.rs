//! Taped two-phase forward and its hand-derived backward pass.

use crate::error::Result;
use crate::insertion::{splice, PromptLayout};
use crate::model::{
    backward_block, lm_logits_backward, lm_logits_cached, run_block, BlockArgs, BlockTape, ModelConfig, Weights,
};
use crate::modality::{Adapter, AdapterTape, GridSample, IMG};
use crate::numerics::{cross_entropy_with_grad, Matrix, NormCache};

/// Gradients for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub model: Weights,
    pub adapter: Adapter,
}

impl Grads {
    pub fn zeros(cfg: &ModelConfig, adapter: &Adapter) -> Self {
        Self { model: Weights::zeros(cfg), adapter: adapter.zeros_like() }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        self.model.add_assign(&other.model);
        self.adapter.add_assign(&other.adapter);
    }

    pub fn scale(&mut self, s: f32) {
        self.model.scale(s);
        self.adapter.scale(s);
    }

    pub fn global_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.frobenius().powi(2)).sum::<f64>().sqrt()
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut v = self.model.named();
        v.extend(self.adapter.named());
        v
    }
}

pub(crate) struct ForwardTape {
    text_tokens: Vec<usize>,
    n_pre: usize,
    l_mm: usize,
    adapter_tape: AdapterTape,
    shallow: Vec<BlockTape>,
    deep: Vec<BlockTape>,
    final_normed: Matrix,
    final_norm: NormCache,
    final_rows: usize,
    d_logits: Matrix,
}

/// Loss on the answer token predicted from the last prompt position.
pub(crate) fn forward_with_tape(
    cfg: &ModelConfig,
    w: &Weights,
    adapter: &Adapter,
    features: &Matrix,
    sample: &GridSample,
) -> Result<(f32, Matrix, ForwardTape)> {
    let (mm, adapter_tape) = adapter.forward(features)?;
    let layout = crate::insertion::segment_prompt(&sample.question_tokens, IMG, mm, cfg.d_model)?;
    check_layout(cfg, &layout)?;
    let mut text = layout.embed_text(cfg, w)?;
    let (text_tokens, _) = layout.text_tokens();

    let mut shallow = Vec::with_capacity(cfg.insert_layer);
    for layer in 0..cfg.insert_layer {
        let run = run_block(
            cfg,
            &w.blocks[layer],
            &text.activations,
            &text.positions,
            BlockArgs { record_tape: true, ..Default::default() },
        )?;
        text.activations = run.out;
        shallow.push(run.tape.expect("tape recorded"));
    }

    let mut state = splice(&layout, &text, cfg.d_model);
    let mut deep = Vec::with_capacity(cfg.n_layers - cfg.insert_layer);
    for layer in cfg.insert_layer..cfg.n_layers {
        let run = run_block(
            cfg,
            &w.blocks[layer],
            &state.activations,
            &state.positions,
            BlockArgs { record_tape: true, ..Default::default() },
        )?;
        state.activations = run.out;
        deep.push(run.tape.expect("tape recorded"));
    }

    let last = state.len() - 1;
    let (logits, final_normed, final_norm) = lm_logits_cached(w, &state.activations.select_rows(&[last]))?;
    let (loss, d_logits) = cross_entropy_with_grad(&logits, &[sample.answer_token])?;
    let tape = ForwardTape {
        text_tokens,
        n_pre: layout.pre_text.len(),
        l_mm: layout.l_mm(),
        adapter_tape,
        shallow,
        deep,
        final_normed,
        final_norm,
        final_rows: state.len(),
        d_logits,
    };
    Ok((loss, logits, tape))
}

fn check_layout(cfg: &ModelConfig, layout: &PromptLayout) -> Result<()> {
    if layout.total_len() > cfg.max_positions {
        return Err(crate::Error::InvalidArgument(format!(
            "sample needs {} positions, model has {}",
            layout.total_len(),
            cfg.max_positions
        )));
    }
    Ok(())
}

/// Accumulates the gradient of the taped loss into `grads`.
pub(crate) fn backward(
    cfg: &ModelConfig,
    w: &Weights,
    adapter: &Adapter,
    tape: &ForwardTape,
    grads: &mut Grads,
) -> Result<()> {
    let d_last = lm_logits_backward(w, &tape.final_normed, &tape.final_norm, &tape.d_logits, &mut grads.model)?;
    let mut d_state = Matrix::zeros(tape.final_rows, cfg.d_model);
    d_state.row_mut(tape.final_rows - 1).copy_from_slice(d_last.row(0));

    for (i, layer) in (cfg.insert_layer..cfg.n_layers).enumerate().rev() {
        d_state = backward_block(cfg, &w.blocks[layer], &tape.deep[i], &d_state, &mut grads.model.blocks[layer])?;
    }

    // Split the combined-sequence gradient back into text and multimodal rows.
    let mm_rows: Vec<usize> = (tape.n_pre..tape.n_pre + tape.l_mm).collect();
    let text_rows: Vec<usize> = (0..tape.n_pre).chain(tape.n_pre + tape.l_mm..tape.final_rows).collect();
    let d_mm = d_state.select_rows(&mm_rows);
    let mut d_text = d_state.select_rows(&text_rows);
    adapter.backward(&tape.adapter_tape, &d_mm, &mut grads.adapter)?;

    for layer in (0..cfg.insert_layer).rev() {
        d_text = backward_block(cfg, &w.blocks[layer], &tape.shallow[layer], &d_text, &mut grads.model.blocks[layer])?;
    }
    for (i, &tok) in tape.text_tokens.iter().enumerate() {
        for (g, d) in grads.model.embedding.row_mut(tok).iter_mut().zip(d_text.row(i)) {
            *g += *d;
        }
    }
    Ok(())
}

/// Loss and full gradient for one sample.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    w: &Weights,
    adapter: &Adapter,
    features: &Matrix,
    sample: &GridSample,
) -> Result<(f32, Grads)> {
    let (loss, _, tape) = forward_with_tape(cfg, w, adapter, features, sample)?;
    let mut grads = Grads::zeros(cfg, adapter);
    backward(cfg, w, adapter, &tape, &mut grads)?;
    Ok((loss, grads))
}

/// Loss only, through the same taped path.
pub fn sample_loss(cfg: &ModelConfig, w: &Weights, adapter: &Adapter, features: &Matrix, sample: &GridSample) -> Result<f32> {
    forward_with_tape(cfg, w, adapter, features, sample).map(|(l, _, _)| l)
}
