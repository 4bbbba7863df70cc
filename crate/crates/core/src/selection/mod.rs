//! Insertion-layer selection: a no-retrain sweep of baseline weights and a
//! REINFORCE policy over candidate layers.

mod policy;

pub use policy::{prompt_features, reinforce_train, redundancy_reward, LayerPolicy, PolicyConfig, RewardLog, RewardRow};

use serde::{Deserialize, Serialize};

use crate::analysis::{flops_deepinsert, FlopsQuery};
use crate::error::{invalid, Result};
use crate::modality::{GridSample, GridTask};
use crate::training::{evaluate, MultimodalModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub insert_layer: usize,
    pub accuracy: f64,
    pub acc_identity: f64,
    pub acc_majority: f64,
    pub mean_nll: f64,
    /// Analytical prefill FLOPs, averaged over the split.
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "insert_layer,accuracy,acc_identity,acc_majority,mean_nll,flops";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.entries {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                e.insert_layer, e.accuracy, e.acc_identity, e.acc_majority, e.mean_nll, e.flops
            ));
        }
        out
    }

    pub fn entry(&self, layer: usize) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.insert_layer == layer)
    }
}

/// Evaluates `model`'s weights, unchanged, at each candidate insertion layer.
pub fn noretrain_sweep(
    model: &MultimodalModel,
    candidates: &[usize],
    task: &GridTask,
    split: &[GridSample],
) -> Result<SweepResult> {
    if candidates.is_empty() || split.is_empty() {
        return Err(invalid("sweep needs candidates and samples"));
    }
    let mut entries = Vec::with_capacity(candidates.len());
    for &layer in candidates {
        if layer > model.config.n_layers {
            return Err(invalid(format!("candidate layer {layer} exceeds {}", model.config.n_layers)));
        }
        let m = model.with_insert_layer(layer);
        let e = evaluate(&m, task, split)?;
        let mut flops = 0.0;
        for s in split {
            let l_text = s.question_tokens.len() - 1;
            flops += flops_deepinsert(&FlopsQuery::from_config(&m.config, l_text, task.l_mm()))?.total as f64;
        }
        entries.push(SweepEntry {
            insert_layer: layer,
            accuracy: e.accuracy,
            acc_identity: e.acc_identity,
            acc_majority: e.acc_majority,
            mean_nll: e.mean_nll,
            flops: flops / split.len() as f64,
        });
    }
    Ok(SweepResult { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "kebab-case")]
pub enum Criterion {
    /// Highest accuracy; ties go to the deeper layer.
    BestAccuracy,
    /// Deepest layer within `delta` accuracy points of layer 0.
    Knee { delta: f64 },
    /// Policy mean depth, rounded.
    ExpectedDepth,
}

impl Default for Criterion {
    fn default() -> Self {
        Criterion::Knee { delta: 1.0 }
    }
}

/// A policy's distribution over its candidate layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub candidates: Vec<usize>,
    pub probs: Vec<f64>,
}

impl PolicySummary {
    pub fn mean_depth(&self) -> f64 {
        self.candidates.iter().zip(&self.probs).map(|(&c, &p)| c as f64 * p).sum()
    }

    /// Most probable layer; ties go to the deeper layer.
    pub fn modal_layer(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best]
                || (self.probs[i] == self.probs[best] && self.candidates[i] > self.candidates[best])
            {
                best = i;
            }
        }
        self.candidates[best]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Sweep(&'a SweepResult),
    Policy(&'a PolicySummary),
}

/// Recommended insertion layer. A policy answers best-accuracy with its
/// modal layer; a sweep cannot answer expected-depth, and knee needs a
/// layer-0 entry.
pub fn select_layer(evidence: Evidence<'_>, criterion: Criterion) -> Result<usize> {
    match evidence {
        Evidence::Sweep(s) => {
            if s.entries.is_empty() {
                return Err(invalid("empty sweep"));
            }
            match criterion {
                Criterion::BestAccuracy => {
                    let mut best = &s.entries[0];
                    for e in &s.entries[1..] {
                        if e.accuracy > best.accuracy || (e.accuracy == best.accuracy && e.insert_layer > best.insert_layer)
                        {
                            best = e;
                        }
                    }
                    Ok(best.insert_layer)
                }
                Criterion::Knee { delta } => {
                    let base = s.entry(0).ok_or_else(|| invalid("knee selection needs a layer-0 entry"))?.accuracy;
                    Ok(s.entries
                        .iter()
                        .filter(|e| (base - e.accuracy) * 100.0 <= delta + 1e-9)
                        .map(|e| e.insert_layer)
                        .max()
                        .unwrap_or(0))
                }
                Criterion::ExpectedDepth => Err(invalid("expected-depth selection needs a policy")),
            }
        }
        Evidence::Policy(p) => {
            if p.candidates.is_empty() || p.candidates.len() != p.probs.len() {
                return Err(invalid("policy summary needs one probability per candidate"));
            }
            match criterion {
                Criterion::ExpectedDepth => Ok(p.mean_depth().round() as usize),
                Criterion::BestAccuracy => Ok(p.modal_layer()),
                Criterion::Knee { .. } => Err(invalid("knee selection needs a sweep")),
            }
        }
    }
}

#[cfg(test)]
mod tests;
