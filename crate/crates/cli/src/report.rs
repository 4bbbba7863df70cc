use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deepinsert::analysis::svg_lines;
use deepinsert::write_atomic;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub median_ms: f64,
    pub warmup: usize,
    pub reps: usize,
}

/// JSON summary of one command run. Every number also appears in a CSV
/// artifact listed in `artifacts`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    /// Task identity, e.g. `grid4-sym8`.
    pub task: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub insert_layer: usize,
    pub metrics: BTreeMap<String, f64>,
    pub analytical_flops: Option<u64>,
    pub instrumented_muladds: Option<u64>,
    pub wall_clock: Option<WallClock>,
    pub recommended_layer: Option<usize>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    /// Writes `report-<command>.json` into `dir`.
    pub fn write_named(&self, dir: &Path) -> Result<PathBuf> {
        let json = serde_json::to_string_pretty(self)?;
        let path = dir.join(format!("report-{}.json", self.command));
        write_atomic(&path, format!("{json}\n").as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub const TRADEOFF_HEADER: &str = "insert_layer,accuracy,flops,ms";

/// CSV rows ordered by insertion layer, plus an SVG of accuracy against
/// both cost axes (each normalized to its maximum).
pub fn emit_tradeoff(runs: &[RunReport]) -> Result<(String, String)> {
    if runs.len() < 2 {
        bail!("a tradeoff needs at least two runs, got {}", runs.len());
    }
    let first = &runs[0];
    for r in runs {
        if r.task != first.task || r.n_layers != first.n_layers || r.d_model != first.d_model {
            bail!(
                "mixed runs: '{}' ({} layers, d={}) vs '{}' ({} layers, d={})",
                first.task,
                first.n_layers,
                first.d_model,
                r.task,
                r.n_layers,
                r.d_model
            );
        }
    }
    let mut sorted: Vec<&RunReport> = runs.iter().collect();
    sorted.sort_by_key(|r| r.insert_layer);
    let mut csv = format!("{TRADEOFF_HEADER}\n");
    let mut points = Vec::new();
    for r in &sorted {
        let acc = *r.metrics.get("accuracy").context("run report lacks accuracy")?;
        let flops = r.analytical_flops.context("run report lacks analytical FLOPs")?;
        let ms = r.wall_clock.as_ref().map(|w| w.median_ms).context("run report lacks wall-clock")?;
        csv.push_str(&format!("{},{acc:.6},{flops},{ms:.4}\n", r.insert_layer));
        points.push((acc, flops as f64, ms));
    }
    let max_f = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-12);
    let max_ms = points.iter().map(|p| p.2).fold(0.0, f64::max).max(1e-12);
    let svg = svg_lines(
        "accuracy vs forward cost",
        "relative cost",
        "accuracy",
        &[
            ("analytical FLOPs", points.iter().map(|p| (p.1 / max_f, p.0)).collect()),
            ("measured ms", points.iter().map(|p| (p.2 / max_ms, p.0)).collect()),
        ],
    );
    Ok((csv, svg))
}
