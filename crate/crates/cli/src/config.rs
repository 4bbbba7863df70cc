use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deepinsert::insertion::PruneConfig;
use deepinsert::modality::{DatasetConfig, GridTask};
use deepinsert::model::ModelConfig;
use deepinsert::selection::{Criterion, PolicyConfig};
use deepinsert::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Output-root override; takes precedence over the config file, not over `--out-dir`.
pub const OUT_DIR_ENV: &str = "DEEPINSERT_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainSection,
    pub prune: PruneConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub policy: PolicySection,
    pub analysis: AnalysisSection,
    pub tradeoff: TradeoffSection,
    pub generate: GenerateSection,
    pub flops: FlopsSection,
}

/// Prompt lengths for `flops`; default to a cell query over the configured grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub l_text: Option<usize>,
    pub l_mm: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// 0 picks the smallest vocabulary covering the task.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub insert_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f32,
    pub schedule: deepinsert::training::Schedule,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub clip_norm: f32,
    pub d_enc: usize,
    pub adapter_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `train.jsonl`, `val.jsonl`, `test.jsonl`; generated when empty.
    pub dir: Option<PathBuf>,
    pub size: usize,
    pub grid: usize,
    pub symbols: usize,
    pub cell_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `val` or `test`.
    pub split: String,
    pub checkpoint: Option<PathBuf>,
    pub timing_warmup: usize,
    pub timing_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub candidates: Vec<usize>,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub lambda: f64,
    pub lr: f64,
    pub rollout_steps: usize,
    pub candidates: Vec<usize>,
    pub hidden: usize,
    pub baseline_decay: f64,
    /// Fraction of the training split used for rollouts.
    pub subset_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub samples: usize,
    pub top_k: usize,
    pub exclude_first: usize,
    pub knn_k: usize,
    /// Second model for `align`; defaults to the first.
    pub other_checkpoint: Option<PathBuf>,
    pub other_insert_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffSection {
    pub layers: Vec<usize>,
    /// Existing run reports; when empty, one model per layer is trained.
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub sample: usize,
    pub max_new: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            train: TrainSection::default(),
            prune: PruneConfig::None,
            data: DataSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            policy: PolicySection::default(),
            analysis: AnalysisSection::default(),
            tradeoff: TradeoffSection::default(),
            generate: GenerateSection::default(),
            flops: FlopsSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            n_heads: m.n_heads,
            vocab_size: 0,
            max_positions: m.max_positions,
            insert_layer: m.insert_layer,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            schedule: t.schedule,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            steps: t.steps,
            eval_interval: t.eval_interval,
            clip_norm: t.clip_norm,
            d_enc: t.d_enc,
            adapter_hidden: t.adapter_hidden,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            dir: None,
            size: d.size,
            grid: d.task.grid,
            symbols: d.task.symbols,
            cell_fraction: d.cell_fraction,
            val_fraction: d.val_fraction,
            test_fraction: d.test_fraction,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "val".into(), checkpoint: None, timing_warmup: 5, timing_reps: 30 }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { candidates: vec![0, 1, 2, 3, 4], criterion: Criterion::default() }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            lambda: p.lambda,
            lr: p.lr,
            rollout_steps: p.rollout_steps,
            candidates: p.candidates,
            hidden: p.hidden,
            baseline_decay: p.baseline_decay,
            subset_fraction: 0.1,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { samples: 256, top_k: 5, exclude_first: 0, knn_k: 10, other_checkpoint: None, other_insert_layer: None }
    }
}

impl Default for TradeoffSection {
    fn default() -> Self {
        Self { layers: vec![0, 2, 4, 6], reports: Vec::new() }
    }
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { sample: 0, max_new: 4 }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Sets a dotted `key` inside `root`, creating tables on the way.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key '{key}'");
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("'{part}' in '{key}' is not a section"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// File (if any), then `key=value` overrides, then the output-dir
/// overrides: env var, then flag.
pub fn resolve(file: Option<&Path>, overrides: &[String], out_dir_flag: Option<&Path>) -> Result<RunConfig> {
    let mut table = match file {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?
            .parse::<toml::Table>()
            .with_context(|| format!("parsing config {}", p.display()))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override '{o}' is not key=value"))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(d) = out_dir_flag {
        cfg.out_dir = d.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn task(&self) -> GridTask {
        GridTask { grid: self.data.grid, symbols: self.data.symbols }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            n_heads: m.n_heads,
            vocab_size: if m.vocab_size == 0 { self.task().min_vocab() } else { m.vocab_size },
            max_positions: m.max_positions,
            insert_layer: m.insert_layer,
        }
    }

    pub fn train_config(&self, checkpoint: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            schedule: t.schedule,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            steps: t.steps,
            eval_interval: t.eval_interval,
            seed: self.seed,
            clip_norm: t.clip_norm,
            d_enc: t.d_enc,
            adapter_hidden: t.adapter_hidden,
            checkpoint_path: checkpoint,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.data;
        DatasetConfig {
            seed: self.seed,
            size: d.size,
            task: self.task(),
            cell_fraction: d.cell_fraction,
            val_fraction: d.val_fraction,
            test_fraction: d.test_fraction,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            lambda: p.lambda,
            lr: p.lr,
            rollout_steps: p.rollout_steps,
            candidates: p.candidates.clone(),
            hidden: p.hidden,
            baseline_decay: p.baseline_decay,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config(None).validate()?;
        self.prune.validate(&self.model_config())?;
        if !matches!(self.eval.split.as_str(), "val" | "test") {
            bail!("eval.split must be 'val' or 'test', got '{}'", self.eval.split);
        }
        if self.eval.timing_reps == 0 {
            bail!("eval.timing_reps must be positive");
        }
        if !(self.policy.subset_fraction > 0.0 && self.policy.subset_fraction <= 1.0) {
            bail!("policy.subset_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    /// Fully resolved TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
