use super::*;
use crate::numerics::Rng;

fn tiny() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 8, d_ff: 16, n_heads: 2, vocab_size: 11, max_positions: 32, insert_layer: 0 }
}

fn random_state(cfg: &ModelConfig, len: usize, seed: u64) -> HiddenState {
    let mut rng = Rng::new(seed);
    let data = (0..len * cfg.d_model).map(|_| rng.normal(1.0)).collect();
    HiddenState {
        activations: Matrix::from_vec(len, cfg.d_model, data).unwrap(),
        positions: (0..len).collect(),
        segments: vec![Segment::Language; len],
    }
}

fn scaled_weights(cfg: &ModelConfig, seed: u64) -> Weights {
    let mut w = Weights::init(cfg, &mut Rng::new(seed));
    for (name, t) in w.named_mut() {
        if !name.contains("gain") && !name.contains("bias") {
            t.scale(15.0);
        }
    }
    w
}

#[test]
fn init_is_deterministic_and_shaped() {
    let cfg = tiny();
    let a = Weights::init(&cfg, &mut Rng::new(7));
    let b = Weights::init(&cfg, &mut Rng::new(7));
    assert_eq!(a, b);
    assert_eq!(a.embedding.shape(), (11, 8));
    assert_eq!(a.blocks[1].w_ff1.shape(), (8, 16));
    assert_ne!(a, Weights::init(&cfg, &mut Rng::new(8)));
}

#[test]
fn init_sample_means_are_small() {
    let cfg = ModelConfig { d_model: 64, d_ff: 128, ..tiny() };
    let w = Weights::init(&cfg, &mut Rng::new(3));
    for (name, t) in w.named() {
        if name.contains("gain") || name.contains("bias") {
            continue;
        }
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.data().len() as f64;
        assert!(mean.abs() <= 0.01, "{name} mean {mean}");
    }
}

#[test]
fn embed_contract() {
    let cfg = tiny();
    let w = Weights::init(&cfg, &mut Rng::new(1));
    let s = embed(&cfg, &w, &[3, 3, 4], &[0, 1, 5]).unwrap();
    assert_eq!(s.activations.row(0), s.activations.row(1));
    assert_eq!(s.positions, vec![0, 1, 5]);
    assert!(embed(&cfg, &w, &[], &[]).unwrap().is_empty());
    assert!(embed(&cfg, &w, &[11], &[0]).is_err());
    assert!(embed(&cfg, &w, &[1], &[32]).is_err());
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = tiny();
    let w = Weights::init(&cfg, &mut Rng::new(1));
    let s = random_state(&cfg, 1, 2);
    let (_, probs) = block_forward_captured(&cfg, &w, 0, &s, None, Capture::Full).unwrap();
    for h in probs.unwrap().heads {
        assert_eq!(h.data(), &[1.0]);
    }
}

#[test]
fn attention_is_causal_in_every_layer_and_head() {
    let cfg = tiny();
    let w = scaled_weights(&cfg, 4);
    let mut s = random_state(&cfg, 6, 5);
    s.positions = vec![0, 2, 3, 7, 8, 9];
    for layer in 0..cfg.n_layers {
        let (next, probs) = block_forward_captured(&cfg, &w, layer, &s, None, Capture::Full).unwrap();
        let probs = probs.unwrap();
        for head in &probs.heads {
            for i in 0..6 {
                for j in 0..6 {
                    if probs.key_positions[j] > probs.query_positions[i] {
                        assert_eq!(head.get(i, j), 0.0);
                    }
                }
                let sum: f64 = head.row(i).iter().map(|&v| v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(next.activations.shape(), (6, cfg.d_model));
        s = next;
    }
}

#[test]
fn incremental_cache_matches_full_recompute() {
    let cfg = tiny();
    let w = scaled_weights(&cfg, 9);
    let s = random_state(&cfg, 7, 10);
    let full = block_forward(&cfg, &w, 1, &s, None).unwrap();
    let mut cache = LayerCache::empty(cfg.d_model);
    let first = block_forward(&cfg, &w, 1, &s.select(&[0, 1, 2, 3]), Some(&mut cache)).unwrap();
    let mut rows = first.activations.clone();
    for i in 4..7 {
        let step = block_forward(&cfg, &w, 1, &s.select(&[i]), Some(&mut cache)).unwrap();
        rows = rows.vstack(&step.activations).unwrap();
    }
    assert_eq!(cache.len(), 7);
    for (a, b) in rows.data().iter().zip(full.activations.data()) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn cache_rejects_out_of_order_positions() {
    let cfg = tiny();
    let w = Weights::init(&cfg, &mut Rng::new(1));
    let s = random_state(&cfg, 3, 2);
    let mut cache = LayerCache::empty(cfg.d_model);
    block_forward(&cfg, &w, 0, &s, Some(&mut cache)).unwrap();
    let err = block_forward(&cfg, &w, 0, &s.select(&[1]), Some(&mut cache)).unwrap_err();
    assert!(matches!(err, Error::Position(_)));
}

#[test]
fn baseline_logits_shape_and_batch_permutation() {
    let cfg = tiny();
    let w = scaled_weights(&cfg, 12);
    let s = random_state(&cfg, 5, 13);
    assert_eq!(baseline_forward(&cfg, &w, &s, &[2, 4]).unwrap().shape(), (2, 11));

    let batch: Vec<_> = (0..4).map(|i| random_state(&cfg, 3 + i, 20 + i as u64)).collect();
    let out = baseline_forward_batch(&cfg, &w, &batch).unwrap();
    let perm = [2, 0, 3, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| batch[i].clone()).collect();
    let out_p = baseline_forward_batch(&cfg, &w, &permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(out_p[k].bits(), out[i].bits());
    }
}

#[test]
fn baseline_rejects_overlong_sequence() {
    let cfg = ModelConfig { max_positions: 4, ..tiny() };
    let w = Weights::init(&cfg, &mut Rng::new(1));
    let s = random_state(&cfg, 5, 1);
    assert!(baseline_forward(&cfg, &w, &s, &[4]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny();
    let w = scaled_weights(&cfg, 30);
    let mut ck = checkpoint::Checkpoint::from_weights(cfg, &w);
    ck.meta.push(("step".into(), 17));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = checkpoint::Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(back.meta("step"), Some(17));
    let w2 = back.weights(&cfg).unwrap();
    for ((_, a), (_, b)) in w.named().iter().zip(w2.named()) {
        assert_eq!(a.bits(), b.bits());
    }
}

#[test]
fn checkpoint_rejects_wrong_shape_by_name() {
    let cfg = tiny();
    let ck = checkpoint::Checkpoint::from_weights(cfg, &Weights::init(&cfg, &mut Rng::new(1)));
    let other = ModelConfig { d_model: 12, n_heads: 2, ..cfg };
    let err = ck.weights(&other).unwrap_err().to_string();
    assert!(err.contains("embedding"), "{err}");

    let mut bytes = ck.to_bytes();
    bytes[8] = 9;
    assert!(checkpoint::Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    assert!(checkpoint::Checkpoint::from_bytes(&bytes[..20]).is_err());
}
