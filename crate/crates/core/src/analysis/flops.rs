use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::insertion::PruneConfig;
use crate::model::ModelConfig;
use crate::numerics::{Component, OpCounter};

/// Inputs of the analytical cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsQuery {
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub n_heads: u64,
    pub l_text: u64,
    pub l_mm: u64,
    pub insert_layer: u64,
}

impl FlopsQuery {
    pub fn from_config(cfg: &ModelConfig, l_text: usize, l_mm: usize) -> Self {
        Self {
            n_layers: cfg.n_layers as u64,
            d_model: cfg.d_model as u64,
            d_ff: cfg.d_ff as u64,
            n_heads: cfg.n_heads as u64,
            l_text: l_text as u64,
            l_mm: l_mm as u64,
            insert_layer: cfg.insert_layer as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.insert_layer > self.n_layers {
            return Err(invalid(format!(
                "insert layer {} exceeds layer count {}",
                self.insert_layer, self.n_layers
            )));
        }
        let positive = [self.n_layers, self.d_model, self.d_ff, self.n_heads, self.l_text];
        if positive.contains(&0) {
            return Err(invalid("layer count, widths, head count and L_text must be positive"));
        }
        Ok(())
    }
}

/// Cost of one block, split the way the analytical model groups terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    /// Q, K and V projections: `6·L·d²`.
    pub projection: u64,
    /// Scores, weighted values and output projection: `4·L²·d + 2·L·d²`.
    pub attention: u64,
    /// `4·L·d·d_ff`.
    pub feed_forward: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.projection + self.attention + self.feed_forward
    }

    fn times(self, n: u64) -> Self {
        Self {
            projection: self.projection * n,
            attention: self.attention * n,
            feed_forward: self.feed_forward * n,
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            projection: self.projection + o.projection,
            attention: self.attention + o.attention,
            feed_forward: self.feed_forward + o.feed_forward,
        }
    }

    /// Groups an instrumented counter the same way.
    pub fn from_counter(c: &OpCounter) -> Self {
        Self {
            projection: c.get(Component::Projection),
            attention: c.get(Component::AttentionScore)
                + c.get(Component::AttentionValue)
                + c.get(Component::OutputProjection),
            feed_forward: c.get(Component::FeedForward),
        }
    }
}

/// Per-block FLOPs for `l` tokens. The softmax term is dropped, so
/// `n_heads` does not enter.
pub fn flops_per_layer(l: u64, d_model: u64, d_ff: u64, _n_heads: u64) -> LayerFlops {
    let d = d_model;
    LayerFlops {
        projection: 6 * l * d * d,
        attention: 4 * l * l * d + 2 * l * d * d,
        feed_forward: 4 * l * d * d_ff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub query: FlopsQuery,
    /// One block over the language tokens only.
    pub text_layer: LayerFlops,
    /// One block over language plus multimodal tokens.
    pub full_layer: LayerFlops,
    /// Sum over all blocks, by component.
    pub breakdown: LayerFlops,
    pub total: u64,
    pub instrumented: Option<LayerFlops>,
}

pub fn flops_deepinsert(q: &FlopsQuery) -> Result<FlopsReport> {
    q.validate()?;
    let text_layer = flops_per_layer(q.l_text, q.d_model, q.d_ff, q.n_heads);
    let full_layer = flops_per_layer(q.l_text + q.l_mm, q.d_model, q.d_ff, q.n_heads);
    let breakdown = text_layer.times(q.insert_layer).plus(full_layer.times(q.n_layers - q.insert_layer));
    Ok(FlopsReport { query: *q, text_layer, full_layer, breakdown, total: breakdown.total(), instrumented: None })
}

/// `N·F(L_text+L_mm) − N_DI·(8·L_mm·d² + 4·(2·L_text+L_mm)·L_mm·d + 4·L_mm·d·d_ff)`.
pub fn flops_subtraction_form(q: &FlopsQuery) -> Result<u64> {
    q.validate()?;
    let (d, lt, lm) = (q.d_model, q.l_text, q.l_mm);
    let full = flops_per_layer(lt + lm, d, q.d_ff, q.n_heads).total();
    let saved = 8 * lm * d * d + 4 * (2 * lt + lm) * lm * d + 4 * lm * d * q.d_ff;
    Ok(q.n_layers * full - q.insert_layer * saved)
}

/// `N_DI·F(L_text) + (N − N_DI)·F(L_text+L_mm)`.
pub fn flops_split_sum_form(q: &FlopsQuery) -> Result<u64> {
    q.validate()?;
    let text = flops_per_layer(q.l_text, q.d_model, q.d_ff, q.n_heads).total();
    let full = flops_per_layer(q.l_text + q.l_mm, q.d_model, q.d_ff, q.n_heads).total();
    Ok(q.insert_layer * text + (q.n_layers - q.insert_layer) * full)
}

/// Sum of per-block costs at each block's effective length, for prefill
/// under `prune`.
pub fn flops_piecewise(cfg: &ModelConfig, l_text: usize, l_mm: usize, prune: &PruneConfig) -> Result<LayerFlops> {
    cfg.validate()?;
    prune.validate(cfg)?;
    let mut sum = LayerFlops::default();
    for layer in 0..cfg.n_layers {
        let l = (l_text + prune.mm_tokens_at(cfg, layer, l_mm)) as u64;
        sum = sum.plus(flops_per_layer(l, cfg.d_model as u64, cfg.d_ff as u64, cfg.n_heads as u64));
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub analytical: LayerFlops,
    pub instrumented: LayerFlops,
}

impl Reconciliation {
    pub fn is_exact(&self) -> bool {
        self.analytical == self.instrumented
    }

    /// `(component, instrumented − analytical)` for every component.
    pub fn diff(&self) -> [(&'static str, i128); 3] {
        let d = |a: u64, b: u64| b as i128 - a as i128;
        [
            ("projection", d(self.analytical.projection, self.instrumented.projection)),
            ("attention", d(self.analytical.attention, self.instrumented.attention)),
            ("feed_forward", d(self.analytical.feed_forward, self.instrumented.feed_forward)),
        ]
    }

    pub fn ensure_exact(&self) -> Result<()> {
        if self.is_exact() {
            return Ok(());
        }
        let parts: Vec<String> = self.diff().iter().map(|(n, d)| format!("{n} {d:+}")).collect();
        Err(Error::InvalidArgument(format!(
            "instrumented count {} != analytical {} (instrumented - analytical: {})",
            self.instrumented.total(),
            self.analytical.total(),
            parts.join(", ")
        )))
    }
}

/// Compares an instrumented prefill counter with the analytical model.
pub fn reconcile_counts(counter: &OpCounter, q: &FlopsQuery) -> Result<Reconciliation> {
    let report = flops_deepinsert(q)?;
    Ok(Reconciliation { analytical: report.breakdown, instrumented: LayerFlops::from_counter(counter) })
}

/// As [`reconcile_counts`], against the piecewise model for a pruned prefill.
pub fn reconcile_pruned(
    counter: &OpCounter,
    cfg: &ModelConfig,
    l_text: usize,
    l_mm: usize,
    prune: &PruneConfig,
) -> Result<Reconciliation> {
    Ok(Reconciliation {
        analytical: flops_piecewise(cfg, l_text, l_mm, prune)?,
        instrumented: LayerFlops::from_counter(counter),
    })
}
