//! Joint training of the transformer and the adapter on grid-QA.

mod backprop;
mod state;

pub use backprop::{loss_and_grads, sample_loss, Grads};
pub use state::TrainState;

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::insertion::{deepinsert_prefill, prefill_with, PrefillOptions, PruneConfig};
use crate::modality::{sample_layout, Adapter, FrozenEncoder, GridSample, GridTask, QueryType};
use crate::model::{ModelConfig, Weights};
use crate::numerics::{counter, AdamConfig, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub clip_norm: f32,
    pub d_enc: usize,
    pub adapter_hidden: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            batch_size: 32,
            steps: 20_000,
            eval_interval: 1_000,
            seed: 0,
            clip_norm: 1.0,
            d_enc: 16,
            adapter_hidden: 64,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 || self.steps < self.eval_interval {
            return Err(invalid(format!(
                "need steps ({}) >= eval_interval ({}) >= 1",
                self.steps, self.eval_interval
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr * step as f32 / self.warmup_steps as f32;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (self.steps - self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps.min(step)) as f64 / span;
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())) as f32
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub val_loss: f64,
    pub val_acc_identity: f64,
    pub val_acc_majority: f64,
    pub muladds_fwd: u64,
    /// Wall clock; excluded from reproducibility comparisons.
    pub ms_fwd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    /// `(step, mean batch loss)`.
    pub train_loss: Vec<(usize, f32)>,
    pub evals: Vec<EvalRow>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str = "step,loss,val_acc_identity,val_acc_majority,muladds_fwd,ms_fwd";

    /// One row per step; evaluation columns are empty between evaluations.
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for &(step, loss) in &self.train_loss {
            out.push_str(&format!("{step},{loss:.6}"));
            match self.evals.iter().find(|e| e.step == step) {
                Some(e) => {
                    let ms = if include_timing { format!("{:.3}", e.ms_fwd) } else { String::new() };
                    out.push_str(&format!(
                        ",{:.6},{:.6},{},{ms}\n",
                        e.val_acc_identity, e.val_acc_majority, e.muladds_fwd
                    ));
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }

    pub fn final_eval(&self) -> Option<&EvalRow> {
        self.evals.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc_identity: f64,
    pub acc_majority: f64,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub n_identity: usize,
    pub n_majority: usize,
}

/// Anything that scores the vocabulary for a sample's answer position.
pub trait AnswerModel {
    fn answer_logits(&self, sample: &GridSample) -> Result<Vec<f32>>;
}

/// Transformer + adapter + frozen encoder, evaluated through late-entry prefill.
#[derive(Debug, Clone)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    pub weights: Weights,
    pub adapter: Adapter,
    pub encoder: FrozenEncoder,
    pub prune: PruneConfig,
}

impl MultimodalModel {
    pub fn new(config: ModelConfig, weights: Weights, adapter: Adapter, task: &GridTask) -> Self {
        let encoder = FrozenEncoder::new(task, adapter.d_enc());
        Self { config, weights, adapter, encoder, prune: PruneConfig::None }
    }

    pub fn init(config: ModelConfig, task: &GridTask, tc: &TrainConfig) -> Self {
        let mut rng = Rng::new(tc.seed);
        let weights = Weights::init(&config, &mut rng);
        let adapter = Adapter::init(tc.d_enc, tc.adapter_hidden, config.d_model, &mut rng);
        Self::new(config, weights, adapter, task)
    }

    pub fn with_insert_layer(&self, layer: usize) -> Self {
        let mut m = self.clone();
        m.config.insert_layer = layer;
        m
    }

    pub fn prefill_options(&self) -> PrefillOptions {
        PrefillOptions { prune: self.prune, ..Default::default() }
    }
}

impl AnswerModel for MultimodalModel {
    fn answer_logits(&self, sample: &GridSample) -> Result<Vec<f32>> {
        let layout = sample_layout(&self.encoder, &self.adapter, sample)?;
        let p = prefill_with(&self.config, &self.weights, &layout, self.prefill_options())?;
        Ok(p.logits.row(0).to_vec())
    }
}

/// Accuracy (argmax restricted to the answer alphabet) and mean NLL
/// (full-vocabulary softmax) per query type.
pub fn evaluate_with(model: &dyn AnswerModel, task: &GridTask, split: &[GridSample]) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let answers = task.answer_tokens();
    let mut r = EvalResult::default();
    let (mut hit_id, mut hit_maj) = (0usize, 0usize);
    let mut nll = 0.0f64;
    for s in split {
        let logits = model.answer_logits(s)?;
        if logits.len() < answers.end {
            return Err(invalid(format!("{} logits do not cover answer tokens {answers:?}", logits.len())));
        }
        let mut best = answers.start;
        for t in answers.clone() {
            if logits[t] > logits[best] {
                best = t;
            }
        }
        let correct = best == s.answer_token;
        match s.qtype {
            QueryType::Cell => {
                r.n_identity += 1;
                hit_id += correct as usize;
            }
            QueryType::Row => {
                r.n_majority += 1;
                hit_maj += correct as usize;
            }
        }
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        nll += lse - logits[s.answer_token] as f64;
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    r.acc_identity = frac(hit_id, r.n_identity);
    r.acc_majority = frac(hit_maj, r.n_majority);
    r.accuracy = frac(hit_id + hit_maj, split.len());
    r.mean_nll = nll / split.len() as f64;
    Ok(r)
}

pub fn evaluate(model: &MultimodalModel, task: &GridTask, split: &[GridSample]) -> Result<EvalResult> {
    evaluate_with(model, task, split)
}

/// Core mul-adds of one prefill of `sample`.
pub fn forward_muladds(model: &MultimodalModel, sample: &GridSample) -> Result<u64> {
    let layout = sample_layout(&model.encoder, &model.adapter, sample)?;
    let (p, n) = counter::measure(|| prefill_with(&model.config, &model.weights, &layout, model.prefill_options()));
    p?;
    Ok(n.core_total())
}

/// Median wall-clock milliseconds of `reps` prefills after `warmup` runs.
pub fn time_prefill(model: &MultimodalModel, sample: &GridSample, warmup: usize, reps: usize) -> Result<f64> {
    let layout = sample_layout(&model.encoder, &model.adapter, sample)?;
    for _ in 0..warmup {
        deepinsert_prefill(&model.config, &model.weights, &layout)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        prefill_with(&model.config, &model.weights, &layout, model.prefill_options())?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut times))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub struct TrainOutcome {
    pub model: MultimodalModel,
    pub log: MetricsLog,
    pub state: TrainState,
}

/// Trains from scratch (or resumes from `resume`) for `tc.steps` steps.
///
/// Batch `t` is drawn from a stream derived from `(seed, t)`, so a run
/// resumed from a checkpoint at step `t` sees the same batches as an
/// uninterrupted one.
pub fn train(
    model: MultimodalModel,
    train_set: &[GridSample],
    val_set: &[GridSample],
    task: &GridTask,
    tc: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    model.config.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut model = model;
    let mut state = match resume {
        Some(s) => {
            model.weights = s.weights.clone();
            model.adapter = s.adapter.clone();
            s
        }
        None => TrainState::fresh(&model.weights, &model.adapter),
    };
    let mut log = MetricsLog::default();
    let features: Vec<Matrix> = train_set.iter().map(|s| model.encoder.encode(s)).collect();
    let adam = |lr| AdamConfig { lr, ..AdamConfig::default() };
    let cfg = model.config;

    for step in state.step + 1..=tc.steps {
        let mut rng = Rng::derived(tc.seed, step as u64);
        let mut grads = Grads::zeros(&cfg, &model.adapter);
        let mut loss_sum = 0.0f64;
        for _ in 0..tc.batch_size {
            let i = rng.below(train_set.len());
            let (loss, _, tape) =
                backprop::forward_with_tape(&cfg, &model.weights, &model.adapter, &features[i], &train_set[i])?;
            backprop::backward(&cfg, &model.weights, &model.adapter, &tape, &mut grads)?;
            loss_sum += loss as f64;
        }
        let loss = (loss_sum / tc.batch_size as f64) as f32;
        if !loss.is_finite() {
            let ck = tc.checkpoint_path.as_ref().map(|p| p.display().to_string());
            return Err(Error::NonFinite(format!(
                "training loss at step {step}; last good checkpoint: {}",
                ck.unwrap_or_else(|| "none".into())
            )));
        }
        grads.scale(1.0 / tc.batch_size as f32);
        let norm = grads.global_norm();
        if tc.clip_norm > 0.0 && norm > tc.clip_norm as f64 {
            grads.scale((tc.clip_norm as f64 / norm) as f32);
        }
        let hyper = adam(tc.lr_at(step));
        state.apply(&mut model.weights, &mut model.adapter, &grads, &hyper, step as u64)?;
        state.step = step;
        log.train_loss.push((step, loss));

        if step % tc.eval_interval == 0 || step == tc.steps {
            let e = evaluate(&model, task, val_set)?;
            let probe = &val_set[0];
            log.evals.push(EvalRow {
                step,
                val_loss: e.mean_nll,
                val_acc_identity: e.acc_identity,
                val_acc_majority: e.acc_majority,
                muladds_fwd: forward_muladds(&model, probe)?,
                ms_fwd: time_prefill(&model, probe, 1, 5)?,
            });
            log::info!(
                "step {step} loss {loss:.4} val_nll {:.4} acc_id {:.3} acc_maj {:.3}",
                e.mean_nll,
                e.acc_identity,
                e.acc_majority
            );
            if let Some(path) = &tc.checkpoint_path {
                state.snapshot(&model.weights, &model.adapter);
                state.save(path, &cfg)?;
            }
        }
    }
    state.snapshot(&model.weights, &model.adapter);
    Ok(TrainOutcome { model, log, state })
}

#[cfg(test)]
mod tests;
