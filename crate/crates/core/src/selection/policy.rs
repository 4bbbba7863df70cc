use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::modality::{GridSample, IMG};
use crate::numerics::Rng;
use crate::training::{AnswerModel, MultimodalModel};

use super::PolicySummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Weight of the redundancy reward.
    pub lambda: f64,
    pub lr: f64,
    pub rollout_steps: usize,
    pub candidates: Vec<usize>,
    pub hidden: usize,
    /// Moving-average factor of the reward baseline.
    pub baseline_decay: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            lr: 0.05,
            rollout_steps: 3000,
            candidates: vec![0, 2, 4, 6],
            hidden: 16,
            baseline_decay: 0.95,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.candidates.is_empty() {
            return Err(invalid("candidate set is empty"));
        }
        if let Some(c) = self.candidates.iter().find(|&&c| c > n_layers) {
            return Err(invalid(format!("candidate layer {c} outside [0, {n_layers}]")));
        }
        let mut sorted = self.candidates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.candidates.len() {
            return Err(invalid("candidate layers must be distinct"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(invalid("baseline_decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `ℓ / N`: 0 for no skipping, 1 for skipping every block.
pub fn redundancy_reward(layer: usize, n_layers: usize) -> f64 {
    layer as f64 / n_layers as f64
}

/// One-hidden-layer tanh MLP from a pooled prompt embedding to a softmax
/// over candidate layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPolicy {
    pub candidates: Vec<usize>,
    d_in: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct PolicyPass {
    h: Vec<f64>,
    probs: Vec<f64>,
}

impl LayerPolicy {
    /// Starts uniform: output weights are zero.
    pub fn new(d_in: usize, hidden: usize, candidates: Vec<usize>, rng: &mut Rng) -> Self {
        let c = candidates.len();
        let std = 1.0 / (d_in.max(1) as f32).sqrt();
        Self {
            w1: (0..d_in * hidden).map(|_| rng.normal(std) as f64).collect(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * c],
            b2: vec![0.0; c],
            candidates,
            d_in,
            hidden,
        }
    }

    fn pass(&self, x: &[f64]) -> PolicyPass {
        let c = self.candidates.len();
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| (self.b1[j] + (0..self.d_in).map(|i| x[i] * self.w1[i * self.hidden + j]).sum::<f64>()).tanh())
            .collect();
        let logits: Vec<f64> =
            (0..c).map(|k| self.b2[k] + (0..self.hidden).map(|j| h[j] * self.w2[j * c + k]).sum::<f64>()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        PolicyPass { h, probs: e.into_iter().map(|v| v / z).collect() }
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.pass(x).probs
    }

    /// Gradient ascent on `advantage · log π(action | x)`.
    pub(crate) fn reinforce_step(&mut self, x: &[f64], action: usize, advantage: f64, lr: f64) {
        let c = self.candidates.len();
        let PolicyPass { h, probs } = self.pass(x);
        let dlogit: Vec<f64> =
            (0..c).map(|k| advantage * ((k == action) as u8 as f64 - probs[k])).collect();
        let mut dh = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            for k in 0..c {
                dh[j] += dlogit[k] * self.w2[j * c + k];
                self.w2[j * c + k] += lr * dlogit[k] * h[j];
            }
        }
        for k in 0..c {
            self.b2[k] += lr * dlogit[k];
        }
        for j in 0..self.hidden {
            let dpre = dh[j] * (1.0 - h[j] * h[j]);
            self.b1[j] += lr * dpre;
            for i in 0..self.d_in {
                self.w1[i * self.hidden + j] += lr * dpre * x[i];
            }
        }
    }

    /// Distribution averaged over `inputs`.
    pub fn summarize(&self, inputs: &[Vec<f64>]) -> PolicySummary {
        let mut probs = vec![0.0; self.candidates.len()];
        for x in inputs {
            for (a, p) in probs.iter_mut().zip(self.probs(x)) {
                *a += p;
            }
        }
        let n = inputs.len().max(1) as f64;
        PolicySummary { candidates: self.candidates.clone(), probs: probs.into_iter().map(|p| p / n).collect() }
    }
}

/// Standardized mean embedding of the prompt's language tokens.
pub fn prompt_features(model: &MultimodalModel, sample: &GridSample) -> Vec<f64> {
    let d = model.config.d_model;
    let mut x = vec![0.0f64; d];
    let tokens: Vec<usize> = sample.question_tokens.iter().copied().filter(|&t| t != IMG).collect();
    for &t in &tokens {
        for (a, &v) in x.iter_mut().zip(model.weights.embedding.row(t)) {
            *a += v as f64;
        }
    }
    let n = tokens.len().max(1) as f64;
    x.iter_mut().for_each(|v| *v /= n);
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + 1e-12).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub step: usize,
    pub layer: usize,
    pub nll: f64,
    /// `-nll`.
    pub performance: f64,
    /// `lambda · ℓ / N`.
    pub redundancy: f64,
    pub total: f64,
    pub baseline: f64,
    /// Policy mean depth on this step's prompt, before the update.
    pub mean_depth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardLog {
    pub rows: Vec<RewardRow>,
}

impl RewardLog {
    pub const CSV_HEADER: &'static str = "step,layer,nll,performance_reward,redundancy_reward,total_reward,baseline,mean_depth";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.layer, r.nll, r.performance, r.redundancy, r.total, r.baseline, r.mean_depth
            ));
        }
        out
    }
}

fn answer_nll(model: &MultimodalModel, sample: &GridSample) -> Result<f64> {
    let logits = model.answer_logits(sample)?;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[sample.answer_token] as f64)
}

/// Trains a layer policy against a frozen model.
///
/// Each rollout draws a prompt, samples a layer, runs the model with that
/// insertion layer and scores `-NLL + λ·ℓ/N`. The model is deterministic
/// and frozen, so each `(prompt, layer)` NLL is computed once and reused.
pub fn reinforce_train(
    model: &MultimodalModel,
    cfg: &PolicyConfig,
    data: &[GridSample],
) -> Result<(LayerPolicy, RewardLog)> {
    let n_layers = model.config.n_layers;
    cfg.validate(n_layers)?;
    if data.is_empty() {
        return Err(invalid("policy training needs at least one sample"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut policy = LayerPolicy::new(model.config.d_model, cfg.hidden, cfg.candidates.clone(), &mut rng);
    let mut log = RewardLog::default();
    if cfg.candidates.len() == 1 {
        return Ok((policy, log));
    }
    let inputs: Vec<Vec<f64>> = data.iter().map(|s| prompt_features(model, s)).collect();
    let mut nll: Vec<Vec<Option<f64>>> = vec![vec![None; cfg.candidates.len()]; data.len()];
    let variants: Vec<MultimodalModel> = cfg.candidates.iter().map(|&c| model.with_insert_layer(c)).collect();
    let mut baseline: Option<f64> = None;
    for step in 1..=cfg.rollout_steps {
        let i = rng.below(data.len());
        let probs = policy.probs(&inputs[i]);
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut a = probs.len() - 1;
        for (k, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                a = k;
                break;
            }
        }
        let layer = cfg.candidates[a];
        let v = match nll[i][a] {
            Some(v) => v,
            None => {
                let v = answer_nll(&variants[a], &data[i])?;
                nll[i][a] = Some(v);
                v
            }
        };
        let redundancy = cfg.lambda * redundancy_reward(layer, n_layers);
        let total = -v + redundancy;
        let b = baseline.unwrap_or(total);
        let mean_depth = cfg.candidates.iter().zip(&probs).map(|(&c, &p)| c as f64 * p).sum();
        policy.reinforce_step(&inputs[i], a, total - b, cfg.lr);
        baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * total);
        log.rows.push(RewardRow { step, layer, nll: v, performance: -v, redundancy, total, baseline: b, mean_depth });
    }
    Ok((policy, log))
}
