use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{LayerCache, ModelConfig};

/// Key/value store split at the insertion layer.
///
/// Layers below `insert_layer` form the shallow region: they only ever hold
/// language tokens and decoded tokens. Layers from `insert_layer` on form
/// the deep region and hold the full combined sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitKVCache {
    insert_layer: usize,
    layers: Vec<LayerCache>,
    mm_positions: Range<usize>,
    l_text: usize,
    next_position: usize,
    decoded: usize,
}

impl SplitKVCache {
    pub(crate) fn new(cfg: &ModelConfig, mm_positions: Range<usize>, l_text: usize) -> Self {
        Self {
            insert_layer: cfg.insert_layer,
            layers: (0..cfg.n_layers).map(|_| LayerCache::empty(cfg.d_model)).collect(),
            next_position: l_text + mm_positions.len(),
            mm_positions,
            l_text,
            decoded: 0,
        }
    }

    pub fn insert_layer(&self) -> usize {
        self.insert_layer
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }

    pub fn is_shallow(&self, layer: usize) -> bool {
        layer < self.insert_layer
    }

    pub fn mm_positions(&self) -> Range<usize> {
        self.mm_positions.clone()
    }

    pub fn l_text(&self) -> usize {
        self.l_text
    }

    pub fn l_mm(&self) -> usize {
        self.mm_positions.len()
    }

    /// Position the next decoded token must take.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn decoded(&self) -> usize {
        self.decoded
    }

    pub(crate) fn advance(&mut self) {
        self.next_position += 1;
        self.decoded += 1;
    }

    /// Rows held by the first shallow layer, if there is one.
    pub fn shallow_rows(&self) -> Option<usize> {
        (self.insert_layer > 0).then(|| self.layers[0].len())
    }

    /// Rows held by the first deep layer, if there is one.
    pub fn deep_rows(&self) -> Option<usize> {
        self.layers.get(self.insert_layer).map(LayerCache::len)
    }

    pub fn is_multimodal(&self, position: usize) -> bool {
        self.mm_positions.contains(&position)
    }

    /// Checks the structural invariants: no multimodal row in any shallow
    /// layer and strictly increasing positions within every layer.
    pub fn verify(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Position(format!("layer {i} cache positions not increasing")));
            }
            if self.is_shallow(i) && layer.positions.iter().any(|&p| self.is_multimodal(p)) {
                return Err(Error::InvalidArgument(format!("shallow layer {i} holds a multimodal row")));
            }
        }
        Ok(())
    }
}
