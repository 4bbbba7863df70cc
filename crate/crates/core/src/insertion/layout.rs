use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{embed, HiddenState, ModelConfig, Segment, Weights};
use crate::numerics::Matrix;

/// A prompt split into text before the multimodal slot, the slot itself and
/// text after it. Global positions are contiguous across the three parts,
/// so post-slot text keeps its offset even when the slot is not present.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayout {
    pub pre_text: Vec<usize>,
    pub mm_embeddings: Matrix,
    pub post_text: Vec<usize>,
}

impl PromptLayout {
    pub fn new(pre_text: Vec<usize>, mm_embeddings: Matrix, post_text: Vec<usize>) -> Self {
        Self { pre_text, mm_embeddings, post_text }
    }

    pub fn l_mm(&self) -> usize {
        self.mm_embeddings.rows()
    }

    pub fn l_text(&self) -> usize {
        self.pre_text.len() + self.post_text.len()
    }

    pub fn total_len(&self) -> usize {
        self.l_text() + self.l_mm()
    }

    pub fn pre_range(&self) -> Range<usize> {
        0..self.pre_text.len()
    }

    pub fn mm_range(&self) -> Range<usize> {
        let s = self.pre_text.len();
        s..s + self.l_mm()
    }

    pub fn post_range(&self) -> Range<usize> {
        let s = self.pre_text.len() + self.l_mm();
        s..s + self.post_text.len()
    }

    /// Language tokens in order, with their reserved global positions.
    pub fn text_tokens(&self) -> (Vec<usize>, Vec<usize>) {
        let tokens = self.pre_text.iter().chain(&self.post_text).copied().collect();
        let positions = self.pre_range().chain(self.post_range()).collect();
        (tokens, positions)
    }

    pub fn segment_at(&self, position: usize) -> Segment {
        if self.mm_range().contains(&position) {
            Segment::Multimodal
        } else {
            Segment::Language
        }
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.l_mm() > 0 && self.mm_embeddings.cols() != cfg.d_model {
            return Err(Error::Shape {
                op: "prompt_layout",
                detail: format!("adapter width {} vs d_model {}", self.mm_embeddings.cols(), cfg.d_model),
            });
        }
        if self.total_len() > cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "combined length {} exceeds max_positions {}",
                self.total_len(),
                cfg.max_positions
            )));
        }
        if self.total_len() == 0 {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        Ok(())
    }

    /// Language rows embedded at their reserved positions.
    pub fn embed_text(&self, cfg: &ModelConfig, w: &Weights) -> Result<HiddenState> {
        let (tokens, positions) = self.text_tokens();
        embed(cfg, w, &tokens, &positions)
    }

    /// Full sequence as the conventional architecture sees it at block 0:
    /// text embeddings with the adapter output spliced in at the slot.
    pub fn assemble(&self, cfg: &ModelConfig, w: &Weights) -> Result<HiddenState> {
        self.check(cfg)?;
        let text = self.embed_text(cfg, w)?;
        Ok(splice(self, &text, cfg.d_model))
    }
}

/// Interleaves language rows of `text` (ordered pre ‖ post) with the raw
/// multimodal embeddings in position order.
pub(crate) fn splice(layout: &PromptLayout, text: &HiddenState, d_model: usize) -> HiddenState {
    let n_pre = layout.pre_text.len();
    let mut acts = Matrix::zeros(0, d_model);
    let mut positions = Vec::with_capacity(layout.total_len());
    let mut segments = Vec::with_capacity(layout.total_len());
    for i in 0..n_pre {
        acts.push_row(text.activations.row(i));
        positions.push(text.positions[i]);
        segments.push(Segment::Language);
    }
    for (k, p) in layout.mm_range().enumerate() {
        acts.push_row(layout.mm_embeddings.row(k));
        positions.push(p);
        segments.push(Segment::Multimodal);
    }
    for i in n_pre..text.len() {
        acts.push_row(text.activations.row(i));
        positions.push(text.positions[i]);
        segments.push(Segment::Language);
    }
    HiddenState { activations: acts, positions, segments }
}

/// Splits a template holding exactly one `placeholder` token into a layout,
/// reserving one position per row of `mm_embeddings`.
pub fn segment_prompt(
    template: &[usize],
    placeholder: usize,
    mm_embeddings: Matrix,
    d_model: usize,
) -> Result<PromptLayout> {
    let slots: Vec<usize> = template
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == placeholder)
        .map(|(i, _)| i)
        .collect();
    let at = match slots.as_slice() {
        [i] => *i,
        [] => return Err(Error::InvalidArgument("prompt has no multimodal placeholder".into())),
        many => {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} multimodal placeholders, expected one",
                many.len()
            )))
        }
    };
    if mm_embeddings.rows() > 0 && mm_embeddings.cols() != d_model {
        return Err(Error::Shape {
            op: "segment_prompt",
            detail: format!("adapter width {} vs d_model {d_model}", mm_embeddings.cols()),
        });
    }
    Ok(PromptLayout {
        pre_text: template[..at].to_vec(),
        mm_embeddings,
        post_text: template[at + 1..].to_vec(),
    })
}
