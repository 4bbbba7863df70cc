use super::*;
use crate::modality::{generate_dataset, DatasetConfig};

pub(crate) fn tiny_cfg(insert: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 8, d_ff: 16, n_heads: 2, vocab_size: 33, max_positions: 32, insert_layer: insert }
}

#[test]
fn schedule_shapes() {
    let tc = TrainConfig { lr: 1.0, steps: 100, warmup_steps: 0, ..TrainConfig::default() };
    assert!((tc.lr_at(0) - 1.0).abs() < 1e-6);
    assert!((tc.lr_at(50) - 0.5).abs() < 1e-6);
    assert!(tc.lr_at(100).abs() < 1e-6);
    let warm = TrainConfig { warmup_steps: 10, ..tc.clone() };
    assert!((warm.lr_at(5) - 0.5).abs() < 1e-6);
    assert!(TrainConfig { steps: 5, eval_interval: 10, ..tc }.validate().is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let data = generate_dataset(&DatasetConfig { size: 40, ..DatasetConfig::default() }).unwrap();
    let tc = TrainConfig { lr: 0.0, steps: 3, eval_interval: 3, batch_size: 2, d_enc: 4, adapter_hidden: 8, ..TrainConfig::default() };
    let model = MultimodalModel::init(tiny_cfg(1), &data.task, &tc);
    let before = model.weights.clone();
    let out = train(model, &data.train, &data.val, &data.task, &tc, None).unwrap();
    assert_eq!(out.model.weights, before);
    assert_eq!(out.log.train_loss.len(), 3);
}

#[test]
fn evaluate_scores_constructed_oracle_and_is_order_invariant() {
    struct Copier(GridTask);
    impl AnswerModel for Copier {
        fn answer_logits(&self, s: &GridSample) -> Result<Vec<f32>> {
            let mut v = vec![0.0; self.0.min_vocab()];
            v[s.answer_token] = 10.0;
            Ok(v)
        }
    }
    let data = generate_dataset(&DatasetConfig { size: 60, ..DatasetConfig::default() }).unwrap();
    let r = evaluate_with(&Copier(data.task), &data.task, &data.val).unwrap();
    assert_eq!(r.accuracy, 1.0);

    let tc = TrainConfig { d_enc: 4, adapter_hidden: 8, ..TrainConfig::default() };
    let model = MultimodalModel::init(tiny_cfg(1), &data.task, &tc);
    let a = evaluate(&model, &data.task, &data.train).unwrap();
    let mut rev = data.train.clone();
    rev.reverse();
    let b = evaluate(&model, &data.task, &rev).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert!((a.mean_nll - b.mean_nll).abs() < 1e-9);
    assert!(evaluate(&model, &data.task, &[]).is_err());
}

#[test]
fn metrics_csv_layout() {
    let log = MetricsLog {
        train_loss: vec![(1, 2.5), (2, 2.0)],
        evals: vec![EvalRow { step: 2, val_loss: 1.9, val_acc_identity: 0.5, val_acc_majority: 0.25, muladds_fwd: 100, ms_fwd: 1.5 }],
    };
    let csv = log.to_csv(false);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], MetricsLog::CSV_HEADER);
    assert_eq!(lines[1], "1,2.500000,,,,");
    assert_eq!(lines[2], "2,2.000000,0.500000,0.250000,100,");
    assert!(log.to_csv(true).lines().nth(2).unwrap().ends_with(",1.500"));
}

#[test]
fn taped_forward_matches_inference_prefill() {
    let data = generate_dataset(&DatasetConfig { size: 30, ..DatasetConfig::default() }).unwrap();
    let tc = TrainConfig { d_enc: 4, adapter_hidden: 8, ..TrainConfig::default() };
    for insert in [0, 1, 2] {
        let model = MultimodalModel::init(tiny_cfg(insert), &data.task, &tc);
        for s in &data.val {
            let features = model.encoder.encode(s);
            let (_, taped, _) =
                backprop::forward_with_tape(&model.config, &model.weights, &model.adapter, &features, s).unwrap();
            let served = model.answer_logits(s).unwrap();
            let err = taped.row(0).iter().zip(&served).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err <= 1e-5, "N_DI={insert}: taped vs prefill logits differ by {err:e}");
        }
    }
}
