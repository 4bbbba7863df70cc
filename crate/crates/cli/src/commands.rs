use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deepinsert::analysis::{
    alignment_grid, csv_table, flops_deepinsert, layer_features, mean_var_per_layer, reconcile_counts, svg_heatmap,
    svg_lines, token_contribution_map, trace_first_answer_token, trace_last_prompt_token, traces_to_jsonl, FlopsQuery,
};
use deepinsert::insertion::{argmax, generate, prefill_with, PromptLayout};
use deepinsert::modality::io::{read_split, write_split};
use deepinsert::modality::{generate_dataset, sample_layout, Dataset, GridSample, GridTask, BOS};
use deepinsert::model::Weights;
use deepinsert::numerics::{counter, Matrix, Rng};
use deepinsert::selection::{
    noretrain_sweep, prompt_features, reinforce_train, select_layer, Criterion, Evidence,
};
use deepinsert::training::{evaluate, forward_muladds, time_prefill, train, MultimodalModel, TrainState};
use deepinsert::write_atomic;

use crate::config::RunConfig;
use crate::report::{emit_tradeoff, RunReport, WallClock};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig, command: &str) -> Result<Self> {
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_atomic(&out.join(format!("config-{command}.toml")), cfg.to_toml().as_bytes())?;
        Ok(Self { cfg, out })
    }

    fn write(&self, name: &str, contents: &str, artifacts: &mut Vec<String>) -> Result<()> {
        write_atomic(&self.out.join(name), contents.as_bytes())?;
        artifacts.push(name.to_string());
        Ok(())
    }

    fn report(&self, command: &str) -> RunReport {
        let task = self.cfg.task();
        RunReport {
            command: command.into(),
            config_hash: self.cfg.hash(),
            task: format!("grid{}-sym{}", task.grid, task.symbols),
            n_layers: self.cfg.model.n_layers,
            d_model: self.cfg.model.d_model,
            insert_layer: self.cfg.model.insert_layer,
            ..Default::default()
        }
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg.eval.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    fn data(&self) -> Result<Dataset> {
        if let Some(dir) = &self.cfg.data.dir {
            if dir.join("train.jsonl").exists() {
                let mut parts = Vec::new();
                let mut task = None;
                for name in ["train", "val", "test"] {
                    let (t, s) = read_split(&dir.join(format!("{name}.jsonl")))?;
                    task = Some(t);
                    parts.push(s);
                }
                let task = task.expect("three splits read");
                if task != self.cfg.task() {
                    bail!("dataset in {} was built for {:?}, config asks for {:?}", dir.display(), task, self.cfg.task());
                }
                let test = parts.pop().unwrap();
                let val = parts.pop().unwrap();
                let train = parts.pop().unwrap();
                return Ok(Dataset { task, train, val, test });
            }
        }
        Ok(generate_dataset(&self.cfg.dataset_config())?)
    }

    fn split<'a>(&self, data: &'a Dataset) -> &'a [GridSample] {
        if self.cfg.eval.split == "test" {
            &data.test
        } else {
            &data.val
        }
    }

    fn load_model(&self, path: &Path, insert_layer: usize) -> Result<MultimodalModel> {
        let cfg = self.cfg.model_config().with_insert_layer(insert_layer);
        let state = TrainState::load(path, &cfg).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let mut m = MultimodalModel::new(cfg, state.weights, state.adapter, &self.cfg.task());
        m.prune = self.cfg.prune;
        Ok(m)
    }

    fn model(&self) -> Result<MultimodalModel> {
        self.load_model(&self.checkpoint_path(), self.cfg.model.insert_layer)
    }
}

fn l_text_of(s: &GridSample) -> usize {
    s.question_tokens.len() - 1
}

fn cost_fields(ctx: &Ctx, model: &MultimodalModel, probe: &GridSample, r: &mut RunReport) -> Result<()> {
    let q = FlopsQuery::from_config(&model.config, l_text_of(probe), ctx.cfg.task().l_mm());
    r.analytical_flops = Some(flops_deepinsert(&q)?.total);
    r.instrumented_muladds = Some(forward_muladds(model, probe)?);
    let (warmup, reps) = (ctx.cfg.eval.timing_warmup, ctx.cfg.eval.timing_reps);
    r.wall_clock = Some(WallClock { median_ms: time_prefill(model, probe, warmup, reps)?, warmup, reps });
    Ok(())
}

const EVAL_HEADER: &[&str] =
    &["split", "accuracy", "acc_identity", "acc_majority", "mean_nll", "analytical_flops", "muladds_fwd", "median_ms"];

fn eval_row(split: &str, r: &RunReport) -> Vec<String> {
    let m = |k: &str| format!("{:.6}", r.metrics[k]);
    vec![
        split.into(),
        m("accuracy"),
        m("acc_identity"),
        m("acc_majority"),
        m("mean_nll"),
        r.analytical_flops.unwrap_or(0).to_string(),
        r.instrumented_muladds.unwrap_or(0).to_string(),
        format!("{:.4}", r.wall_clock.as_ref().map_or(0.0, |w| w.median_ms)),
    ]
}

fn evaluate_into(ctx: &Ctx, model: &MultimodalModel, task: &GridTask, split: &[GridSample], r: &mut RunReport) -> Result<()> {
    let e = evaluate(model, task, split)?;
    r.metrics.insert("accuracy".into(), e.accuracy);
    r.metrics.insert("acc_identity".into(), e.acc_identity);
    r.metrics.insert("acc_majority".into(), e.acc_majority);
    r.metrics.insert("mean_nll".into(), e.mean_nll);
    cost_fields(ctx, model, &split[0], r)
}

pub fn gen_data(ctx: &Ctx) -> Result<RunReport> {
    let data = generate_dataset(&ctx.cfg.dataset_config())?;
    let dir = ctx.cfg.data.dir.clone().unwrap_or_else(|| ctx.out.join("data"));
    std::fs::create_dir_all(&dir)?;
    let mut r = ctx.report("gen-data");
    let mut rows = Vec::new();
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let path = dir.join(format!("{name}.jsonl"));
        write_split(&path, &data.task, split)?;
        r.artifacts.push(path.display().to_string());
        r.metrics.insert(format!("n_{name}"), split.len() as f64);
        rows.push(vec![name.to_string(), split.len().to_string()]);
    }
    ctx.write("splits.csv", &csv_table(&["split", "samples"], &rows), &mut r.artifacts)?;
    Ok(r)
}

/// Trains at `cfg.model.insert_layer`, then evaluates the final model.
pub fn train_cmd(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let ckpt = ctx.out.join("checkpoint.bin");
    let tc = ctx.cfg.train_config(Some(ckpt.clone()));
    let mut model = MultimodalModel::init(ctx.cfg.model_config(), &data.task, &tc);
    model.prune = ctx.cfg.prune;
    let checksum = model.encoder.checksum();
    let out = train(model, &data.train, &data.val, &data.task, &tc, None)?;
    if out.model.encoder.checksum() != checksum {
        bail!("frozen encoder changed during training");
    }
    let mut r = ctx.report("train");
    ctx.write("metrics.csv", &out.log.to_csv(true), &mut r.artifacts)?;
    r.artifacts.push("checkpoint.bin".into());
    let last = out.log.final_eval().context("training produced no evaluation")?;
    r.metrics.insert("final_step".into(), last.step as f64);
    r.metrics.insert("val_loss".into(), last.val_loss);
    r.metrics.insert("val_acc_identity".into(), last.val_acc_identity);
    r.metrics.insert("val_acc_majority".into(), last.val_acc_majority);
    evaluate_into(ctx, &out.model, &data.task, &data.val, &mut r)?;
    ctx.write("eval-train.csv", &csv_table(EVAL_HEADER, &[eval_row("val", &r)]), &mut r.artifacts)?;
    Ok(r)
}

pub fn eval_cmd(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let model = ctx.model()?;
    let mut r = ctx.report("eval");
    evaluate_into(ctx, &model, &data.task, ctx.split(&data), &mut r)?;
    ctx.write("eval.csv", &csv_table(EVAL_HEADER, &[eval_row(&ctx.cfg.eval.split, &r)]), &mut r.artifacts)?;
    Ok(r)
}

pub fn sweep_cmd(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let model = ctx.load_model(&ctx.checkpoint_path(), 0)?;
    let sweep = noretrain_sweep(&model, &ctx.cfg.sweep.candidates, &data.task, ctx.split(&data))?;
    let mut r = ctx.report("sweep");
    ctx.write("sweep.csv", &sweep.to_csv(), &mut r.artifacts)?;
    r.recommended_layer = Some(select_layer(Evidence::Sweep(&sweep), ctx.cfg.sweep.criterion)?);
    for e in &sweep.entries {
        r.metrics.insert(format!("accuracy_di{}", e.insert_layer), e.accuracy);
        r.metrics.insert(format!("mean_nll_di{}", e.insert_layer), e.mean_nll);
    }
    Ok(r)
}

pub fn rl_select(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let model = ctx.load_model(&ctx.checkpoint_path(), 0)?;
    let n = ((data.train.len() as f64 * ctx.cfg.policy.subset_fraction).ceil() as usize).clamp(1, data.train.len());
    let subset = &data.train[..n];
    let (policy, log) = reinforce_train(&model, &ctx.cfg.policy_config(), subset)?;
    let inputs: Vec<Vec<f64>> = subset.iter().map(|s| prompt_features(&model, s)).collect();
    let summary = policy.summarize(&inputs);
    let mut r = ctx.report("rl-select");
    ctx.write("rewards.csv", &log.to_csv(), &mut r.artifacts)?;
    let rows: Vec<Vec<String>> = summary
        .candidates
        .iter()
        .zip(&summary.probs)
        .map(|(c, p)| vec![c.to_string(), format!("{p:.6}")])
        .collect();
    ctx.write("policy.csv", &csv_table(&["insert_layer", "probability"], &rows), &mut r.artifacts)?;
    r.recommended_layer = Some(select_layer(Evidence::Policy(&summary), Criterion::ExpectedDepth)?);
    r.metrics.insert("mean_depth".into(), summary.mean_depth());
    r.metrics.insert("modal_layer".into(), summary.modal_layer() as f64);
    Ok(r)
}

/// Analytical totals for the configured model and a cell-query prompt,
/// reconciled against an instrumented prefill of random weights.
pub fn flops_cmd(ctx: &Ctx) -> Result<RunReport> {
    let cfg = ctx.cfg.model_config();
    let task = ctx.cfg.task();
    let l_text = ctx.cfg.flops.l_text.unwrap_or(3);
    let l_mm = ctx.cfg.flops.l_mm.unwrap_or(task.l_mm());
    if l_text == 0 {
        bail!("flops.l_text must be positive");
    }
    let q = FlopsQuery::from_config(&cfg, l_text, l_mm);
    let report = flops_deepinsert(&q)?;
    let mut rng = Rng::new(ctx.cfg.seed);
    let w = Weights::init(&cfg, &mut rng);
    let mut tokens = vec![BOS];
    tokens.extend((1..l_text).map(|_| rng.below(cfg.vocab_size)));
    let mm = Matrix::from_vec(l_mm, cfg.d_model, (0..l_mm * cfg.d_model).map(|_| rng.normal(1.0)).collect())?;
    let layout = PromptLayout::new(vec![tokens[0]], mm, tokens[1..].to_vec());
    let (p, counts) = counter::measure(|| prefill_with(&cfg, &w, &layout, Default::default()));
    p?;
    let rec = reconcile_counts(&counts, &q)?;
    let mut r = ctx.report("flops");
    let rows = vec![
        vec!["projection".into(), rec.analytical.projection.to_string(), rec.instrumented.projection.to_string()],
        vec!["attention".into(), rec.analytical.attention.to_string(), rec.instrumented.attention.to_string()],
        vec!["feed_forward".into(), rec.analytical.feed_forward.to_string(), rec.instrumented.feed_forward.to_string()],
        vec!["total".into(), report.total.to_string(), rec.instrumented.total().to_string()],
    ];
    ctx.write("flops.csv", &csv_table(&["component", "analytical", "instrumented"], &rows), &mut r.artifacts)?;
    r.analytical_flops = Some(report.total);
    r.instrumented_muladds = Some(rec.instrumented.total());
    rec.ensure_exact()?;
    Ok(r)
}

pub fn analyze_attn(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let model = ctx.model()?;
    let split = ctx.split(&data);
    let samples = &split[..ctx.cfg.analysis.samples.min(split.len())];
    let answers = data.task.answer_tokens();
    let mut correct = Vec::new();
    let mut answer_traces = Vec::new();
    for s in samples {
        let layout = sample_layout(&model.encoder, &model.adapter, s)?;
        let (trace, logits) = trace_last_prompt_token(&model.config, &model.weights, &layout)?;
        let restricted = &logits[answers.clone()];
        if answers.start + argmax(restricted) == s.answer_token {
            correct.push(trace);
        }
        answer_traces.push(trace_first_answer_token(&model.config, &model.weights, &layout)?);
    }
    let mut r = ctx.report("analyze-attn");
    r.metrics.insert("samples".into(), samples.len() as f64);
    r.metrics.insert("correct".into(), correct.len() as f64);
    ctx.write("traces.jsonl", &traces_to_jsonl(&correct), &mut r.artifacts)?;

    let var = mean_var_per_layer(&answer_traces)?;
    let rows: Vec<Vec<String>> = var
        .iter()
        .enumerate()
        .map(|(l, v)| vec![l.to_string(), format!("{v:.6}"), format!("{:.6}", 1.0 - v)])
        .collect();
    ctx.write("var.csv", &csv_table(&["layer", "var", "language_ratio"], &rows), &mut r.artifacts)?;
    let pts: Vec<(f64, f64)> = var.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect();
    ctx.write("var.svg", &svg_lines("multimodal attention ratio", "layer", "VAR", &[("VAR", pts)]), &mut r.artifacts)?;

    if correct.is_empty() {
        log::warn!("no correctly answered samples; skipping the contribution map");
    } else {
        let map = token_contribution_map(&correct, ctx.cfg.analysis.top_k, ctx.cfg.analysis.exclude_first)?;
        let header: Vec<String> =
            std::iter::once("layer".to_string()).chain((0..map.scores.cols()).map(|j| format!("token{j}"))).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let grid: Vec<Vec<f64>> =
            (0..map.scores.rows()).map(|l| map.scores.row(l).iter().map(|&v| v as f64).collect()).collect();
        let rows: Vec<Vec<String>> = grid
            .iter()
            .enumerate()
            .map(|(l, row)| std::iter::once(l.to_string()).chain(row.iter().map(|v| format!("{v:.6}"))).collect())
            .collect();
        ctx.write("contribution.csv", &csv_table(&header, &rows), &mut r.artifacts)?;
        ctx.write(
            "contribution.svg",
            &svg_heatmap("layer-relative token contribution", "layer", "multimodal token", &grid, None),
            &mut r.artifacts,
        )?;
        r.metrics.insert("heads_used".into(), map.heads_used as f64);
    }
    Ok(r)
}

pub fn align_cmd(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let a = ctx.model()?;
    let other_path = ctx.cfg.analysis.other_checkpoint.clone().unwrap_or_else(|| ctx.checkpoint_path());
    let b = ctx.load_model(&other_path, ctx.cfg.analysis.other_insert_layer.unwrap_or(ctx.cfg.model.insert_layer))?;
    let split = ctx.split(&data);
    let samples = &split[..ctx.cfg.analysis.samples.min(split.len())];
    let grid = alignment_grid(&layer_features(&a, samples)?, &layer_features(&b, samples)?, ctx.cfg.analysis.knn_k)?;
    let mut r = ctx.report("align");
    let header: Vec<String> =
        std::iter::once("layer_a".to_string()).chain((0..grid[0].len()).map(|j| format!("b{j}"))).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = grid
        .iter()
        .enumerate()
        .map(|(i, row)| std::iter::once(i.to_string()).chain(row.iter().map(|v| format!("{v:.6}"))).collect())
        .collect();
    ctx.write("align.csv", &csv_table(&header, &rows), &mut r.artifacts)?;
    ctx.write("align.svg", &svg_heatmap("mutual k-NN alignment", "model A layer", "model B layer", &grid, Some(1.0)), &mut r.artifacts)?;
    let diag: Vec<f64> = (0..grid.len().min(grid[0].len())).map(|i| grid[i][i]).collect();
    r.metrics.insert("mean_diagonal".into(), diag.iter().sum::<f64>() / diag.len() as f64);
    Ok(r)
}

pub fn tradeoff_cmd(ctx: &Ctx) -> Result<RunReport> {
    let reports: Vec<RunReport> = if ctx.cfg.tradeoff.reports.is_empty() {
        let mut v = Vec::new();
        for &layer in &ctx.cfg.tradeoff.layers {
            let mut cfg = ctx.cfg.clone();
            cfg.model.insert_layer = layer;
            cfg.out_dir = ctx.out.join(format!("di{layer}"));
            cfg.validate()?;
            let sub = Ctx::new(cfg, "train")?;
            let rep = train_cmd(&sub)?;
            rep.write_named(&sub.out)?;
            v.push(rep);
        }
        v
    } else {
        ctx.cfg.tradeoff.reports.iter().map(|p| RunReport::read(p)).collect::<Result<_>>()?
    };
    let (csv, svg) = emit_tradeoff(&reports)?;
    let mut r = ctx.report("tradeoff");
    ctx.write("tradeoff.csv", &csv, &mut r.artifacts)?;
    ctx.write("tradeoff.svg", &svg, &mut r.artifacts)?;
    for rep in &reports {
        r.metrics.insert(format!("accuracy_di{}", rep.insert_layer), rep.metrics["accuracy"]);
    }
    Ok(r)
}

pub fn generate_cmd(ctx: &Ctx) -> Result<RunReport> {
    let data = ctx.data()?;
    let model = ctx.model()?;
    let split = ctx.split(&data);
    let s = split
        .get(ctx.cfg.generate.sample)
        .with_context(|| format!("sample {} outside split of {}", ctx.cfg.generate.sample, split.len()))?;
    let layout = sample_layout(&model.encoder, &model.adapter, s)?;
    let tokens = generate(&model.config, &model.weights, &layout, ctx.cfg.generate.max_new, None)?;
    let mut r = ctx.report("generate");
    let rows: Vec<Vec<String>> = tokens.iter().enumerate().map(|(i, t)| vec![i.to_string(), t.to_string()]).collect();
    ctx.write("generate.csv", &csv_table(&["step", "token"], &rows), &mut r.artifacts)?;
    let mut m = BTreeMap::new();
    m.insert("first_token_correct".into(), (tokens.first() == Some(&s.answer_token)) as u8 as f64);
    m.insert("generated".into(), tokens.len() as f64);
    r.metrics = m;
    println!(
        "question {:?} -> generated {:?} (expected first token {})",
        s.question_tokens, tokens, s.answer_token
    );
    Ok(r)
}
