use super::policy::LayerPolicy;
use super::*;
use crate::modality::{generate_dataset, DatasetConfig};
use crate::model::ModelConfig;
use crate::numerics::Rng;
use crate::training::TrainConfig;

fn entry(layer: usize, acc: f64) -> SweepEntry {
    SweepEntry { insert_layer: layer, accuracy: acc, acc_identity: acc, acc_majority: acc, mean_nll: 1.0, flops: 0.0 }
}

#[test]
fn reward_substitution() {
    let r = -2.0 + 0.5 * redundancy_reward(8, 32);
    assert!((r + 1.875).abs() < 1e-12);
    assert_eq!(redundancy_reward(0, 8), 0.0);
    assert_eq!(redundancy_reward(8, 8), 1.0);
}

#[test]
fn knee_returns_deepest_when_delta_covers_total_drop() {
    let s = SweepResult { entries: vec![entry(0, 0.90), entry(1, 0.895), entry(2, 0.894), entry(3, 0.893)] };
    assert_eq!(select_layer(Evidence::Sweep(&s), Criterion::Knee { delta: 1.0 }).unwrap(), 3);
    assert_eq!(select_layer(Evidence::Sweep(&s), Criterion::Knee { delta: 0.65 }).unwrap(), 2);
    assert_eq!(select_layer(Evidence::Sweep(&s), Criterion::Knee { delta: 0.0 }).unwrap(), 0);
}

#[test]
fn best_accuracy_ties_go_deeper() {
    let s = SweepResult { entries: vec![entry(0, 0.5), entry(2, 0.8), entry(4, 0.8), entry(6, 0.1)] };
    assert_eq!(select_layer(Evidence::Sweep(&s), Criterion::BestAccuracy).unwrap(), 4);
    assert!(select_layer(Evidence::Sweep(&s), Criterion::ExpectedDepth).is_err());
    let empty = SweepResult { entries: vec![] };
    assert!(select_layer(Evidence::Sweep(&empty), Criterion::BestAccuracy).is_err());
}

#[test]
fn policy_point_mass_expected_depth() {
    let p = PolicySummary { candidates: vec![1, 3, 5], probs: vec![0.0, 1.0, 0.0] };
    assert_eq!(select_layer(Evidence::Policy(&p), Criterion::ExpectedDepth).unwrap(), 3);
    assert_eq!(select_layer(Evidence::Policy(&p), Criterion::BestAccuracy).unwrap(), 3);
    let split = PolicySummary { candidates: vec![2, 4], probs: vec![0.5, 0.5] };
    assert_eq!(split.modal_layer(), 4);
    assert_eq!(split.mean_depth(), 3.0);
}

#[test]
fn bandit_reinforce_concentrates_on_best_arm() {
    let mut rng = Rng::new(1);
    let mut policy = LayerPolicy::new(4, 8, vec![0, 2, 4, 6], &mut rng);
    let x = vec![0.5, -1.0, 0.25, 1.0];
    let reward = [-1.0, -0.4, -0.9, -1.5];
    let mut baseline: Option<f64> = None;
    for _ in 0..2000 {
        let probs = policy.probs(&x);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12 && probs.iter().all(|&p| p >= 0.0));
        let u = rng.uniform();
        let mut a = 3;
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                a = k;
                break;
            }
        }
        let b = baseline.unwrap_or(reward[a]);
        policy.reinforce_step(&x, a, reward[a] - b, 0.1);
        baseline = Some(0.9 * b + 0.1 * reward[a]);
    }
    let s = policy.summarize(&[x]);
    assert_eq!(s.modal_layer(), 2);
    assert!(s.probs[1] > 0.9);
}

fn tiny_model() -> (MultimodalModel, crate::modality::Dataset) {
    let data = generate_dataset(&DatasetConfig { size: 40, ..DatasetConfig::default() }).unwrap();
    let cfg = ModelConfig {
        n_layers: 4,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        vocab_size: data.task.min_vocab(),
        max_positions: 32,
        insert_layer: 0,
    };
    let tc = TrainConfig { d_enc: 4, adapter_hidden: 8, ..TrainConfig::default() };
    (MultimodalModel::init(cfg, &data.task, &tc), data)
}

#[test]
fn single_candidate_is_point_mass() {
    let (model, data) = tiny_model();
    let cfg = PolicyConfig { candidates: vec![2], ..PolicyConfig::default() };
    let (policy, log) = reinforce_train(&model, &cfg, &data.val).unwrap();
    assert!(log.rows.is_empty());
    let s = policy.summarize(&[prompt_features(&model, &data.val[0])]);
    assert_eq!(s.probs, vec![1.0]);
}

#[test]
fn policy_config_rejects_bad_inputs() {
    let (model, data) = tiny_model();
    let bad = [
        PolicyConfig { candidates: vec![], ..PolicyConfig::default() },
        PolicyConfig { candidates: vec![0, 5], ..PolicyConfig::default() },
        PolicyConfig { candidates: vec![1, 1], ..PolicyConfig::default() },
        PolicyConfig { lambda: -1.0, ..PolicyConfig::default() },
    ];
    for cfg in bad {
        assert!(reinforce_train(&model, &cfg, &data.val).is_err());
    }
    assert!(reinforce_train(&model, &PolicyConfig { candidates: vec![0, 2], ..PolicyConfig::default() }, &[]).is_err());
}

#[test]
fn reward_log_decomposes_and_distribution_stays_valid() {
    let (model, data) = tiny_model();
    let cfg = PolicyConfig { lambda: 0.5, rollout_steps: 50, candidates: vec![0, 2, 4], ..PolicyConfig::default() };
    let (policy, log) = reinforce_train(&model, &cfg, &data.val).unwrap();
    assert_eq!(log.rows.len(), 50);
    for r in &log.rows {
        assert!((r.total - (r.performance + r.redundancy)).abs() < 1e-12);
        assert!((r.redundancy - 0.5 * r.layer as f64 / 4.0).abs() < 1e-12);
    }
    let s = policy.summarize(&data.val.iter().map(|x| prompt_features(&model, x)).collect::<Vec<_>>());
    assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(log.to_csv().starts_with(RewardLog::CSV_HEADER));
    let again = reinforce_train(&model, &cfg, &data.val).unwrap();
    assert_eq!(again.1, log);
}

#[test]
fn sweep_layer_zero_matches_baseline_evaluation() {
    let (model, data) = tiny_model();
    let sweep = noretrain_sweep(&model, &[0, 1, 2, 3, 4], &data.task, &data.val).unwrap();
    let base = crate::training::evaluate(&model, &data.task, &data.val).unwrap();
    let e0 = sweep.entry(0).unwrap();
    assert_eq!((e0.accuracy, e0.mean_nll), (base.accuracy, base.mean_nll));
    assert!(sweep.entries.windows(2).all(|w| w[1].flops < w[0].flops));
    assert_eq!(sweep, noretrain_sweep(&model, &[0, 1, 2, 3, 4], &data.task, &data.val).unwrap());
    assert!(noretrain_sweep(&model, &[5], &data.task, &data.val).is_err());
    assert_eq!(sweep.to_csv().lines().count(), 6);
}
