use super::*;
use crate::model::{baseline_forward, Weights};
use crate::numerics::{counter, Rng};

fn cfg(insert: usize) -> ModelConfig {
    ModelConfig { n_layers: 4, d_model: 8, d_ff: 16, n_heads: 2, vocab_size: 13, max_positions: 64, insert_layer: insert }
}

fn weights(c: &ModelConfig, seed: u64) -> Weights {
    let mut w = Weights::init(c, &mut Rng::new(seed));
    for (name, t) in w.named_mut() {
        if !name.contains("gain") && !name.contains("bias") {
            t.scale(20.0);
        }
    }
    w
}

fn layout(pre: usize, mm: usize, post: usize, seed: u64) -> PromptLayout {
    let mut rng = Rng::new(seed);
    let mm_rows = Matrix::from_vec(mm, 8, (0..mm * 8).map(|_| rng.normal(1.0)).collect()).unwrap();
    PromptLayout::new(
        (0..pre).map(|_| 1 + rng.below(12)).collect(),
        mm_rows,
        (0..post).map(|_| 1 + rng.below(12)).collect(),
    )
}

#[test]
fn segment_prompt_ranges() {
    let e = |n| Matrix::zeros(n, 8);
    let l = segment_prompt(&[1, 2, 3, 4, 0, 5, 6], 0, e(3), 8).unwrap();
    assert_eq!((l.pre_range(), l.mm_range(), l.post_range()), (0..4, 4..7, 7..9));
    let l = segment_prompt(&[1, 2, 3, 4, 0, 5, 6], 0, e(0), 8).unwrap();
    assert_eq!((l.pre_range(), l.mm_range(), l.post_range()), (0..4, 4..4, 4..6));
    let l = segment_prompt(&[0, 5], 0, e(2), 8).unwrap();
    assert_eq!(l.mm_range(), 0..2);
    assert!(segment_prompt(&[1, 2], 0, e(2), 8).is_err());
    assert!(segment_prompt(&[0, 1, 0], 0, e(2), 8).is_err());
    assert!(segment_prompt(&[0, 1], 0, Matrix::zeros(2, 5), 8).is_err());
}

#[test]
fn di0_prefill_is_bitwise_baseline() {
    let c = cfg(0);
    let w = weights(&c, 1);
    let l = layout(2, 3, 3, 2);
    let a = deepinsert_prefill(&c, &w, &l).unwrap().logits;
    let b = baseline_prefill_logits(&c, &w, &l).unwrap();
    assert_eq!(a.bits(), b.bits());
}

#[test]
fn full_skip_equals_text_only_baseline() {
    let c = cfg(4);
    let w = weights(&c, 3);
    let l = layout(2, 3, 3, 4);
    let di = deepinsert_prefill(&c, &w, &l).unwrap().logits;
    let text = l.embed_text(&c, &w).unwrap();
    let base = baseline_forward(&c, &w, &text, &[text.len() - 1]).unwrap();
    assert_eq!(di.bits(), base.bits());
}

#[test]
fn cache_bookkeeping_through_decode() {
    let c = cfg(2);
    let w = weights(&c, 5);
    let l = layout(3, 4, 2, 6);
    let p = deepinsert_prefill(&c, &w, &l).unwrap();
    let mut cache = p.cache;
    assert_eq!(cache.shallow_rows(), Some(5));
    assert_eq!(cache.deep_rows(), Some(9));
    for t in 1..=3 {
        decode_step(&c, &w, &mut cache, 2).unwrap();
        assert_eq!(cache.shallow_rows(), Some(5 + t));
        assert_eq!(cache.deep_rows(), Some(9 + t));
        cache.verify().unwrap();
    }
    assert!(cache.layer(0).positions.iter().all(|p| !(3..7).contains(p)));
    let next = cache.next_position();
    let err = decode_step_at(&c, &w, &mut cache, 2, next + 1, Capture::None).unwrap_err();
    assert!(matches!(err, Error::Position(_)));
}

#[test]
fn generate_contracts() {
    let c = cfg(1);
    let w = weights(&c, 7);
    let l = layout(2, 2, 2, 8);
    let first = argmax(deepinsert_prefill(&c, &w, &l).unwrap().logits.row(0));
    assert_eq!(generate(&c, &w, &l, 1, None).unwrap(), vec![first]);
    let a = generate(&c, &w, &l, 8, None).unwrap();
    assert_eq!(a, generate(&c, &w, &l, 8, None).unwrap());
    assert_eq!(a.len(), 8);
    let stop = a[2];
    let cut = generate(&c, &w, &l, 8, Some(stop)).unwrap();
    let at = a.iter().position(|&t| t == stop).unwrap();
    assert_eq!(cut, a[..=at].to_vec());
    assert!(generate(&c, &w, &l, 0, None).is_err());
}

#[test]
fn prefill_rejects_bad_inputs() {
    let c = ModelConfig { max_positions: 6, ..cfg(1) };
    let w = weights(&c, 1);
    assert!(deepinsert_prefill(&c, &w, &layout(2, 3, 2, 1)).is_err());
    let mut l = layout(1, 2, 1, 1);
    l.mm_embeddings = Matrix::zeros(2, 6);
    assert!(deepinsert_prefill(&c, &w, &l).is_err());
}

#[test]
fn retained_counts() {
    assert_eq!(retained_count(576, 0.25), 144);
    assert_eq!(retained_count(16, 0.5), 8);
    assert_eq!(retained_count(3, 0.01), 1);
    assert_eq!(retained_count(5, 1.0), 5);
}

#[test]
fn prune_validation() {
    let c = cfg(1);
    assert!(PruneConfig::Fastv { start_layer: 2, retention: 0.0 }.validate(&c).is_err());
    assert!(PruneConfig::Fastv { start_layer: 2, retention: 1.5 }.validate(&c).is_err());
    assert!(PruneConfig::Fastv { start_layer: 1, retention: 0.5 }.validate(&c).is_err());
    assert!(PruneConfig::Fastv { start_layer: 2, retention: 0.5 }.validate(&c).is_ok());
    assert!(PruneConfig::Vtw { exit_layer: 0 }.validate(&c).is_err());
    assert!(PruneConfig::Vtw { exit_layer: 4 }.validate(&c).is_ok());
    assert!(PruneConfig::Vtw { exit_layer: 5 }.validate(&c).is_err());
}

#[test]
fn top_k_selection_matches_exhaustive_ranking() {
    // Four multimodal tokens with a hand-set ranking.
    let scores = vec![(3, 0.10), (4, 0.40), (5, 0.05), (6, 0.40)];
    let kept = select_top(&scores, 2);
    // Exhaustive: the pair maximizing total score, ties to lower indices.
    let mut best = (f64::MIN, vec![]);
    for a in 0..4 {
        for b in a + 1..4 {
            let s = scores[a].1 + scores[b].1;
            if s > best.0 {
                best = (s, vec![scores[a].0, scores[b].0]);
            }
        }
    }
    assert_eq!(kept, best.1);
    assert_eq!(select_top(&[(0, 1.0), (1, 1.0), (2, 1.0)], 2), vec![0, 1]);
}

#[test]
fn pruning_no_ops() {
    let c = cfg(1);
    let w = weights(&c, 11);
    let l = layout(2, 4, 3, 12);
    let plain = deepinsert_prefill(&c, &w, &l).unwrap().logits;
    for prune in [
        PruneConfig::Fastv { start_layer: 2, retention: 1.0 },
        PruneConfig::Vtw { exit_layer: 4 },
    ] {
        let opts = PrefillOptions { prune, ..Default::default() };
        let out = prefill_with(&c, &w, &l, opts).unwrap().logits;
        assert_eq!(out.bits(), plain.bits(), "{prune:?}");
    }
}

#[test]
fn vtw_at_insertion_equals_full_skip() {
    let c = cfg(2);
    let w = weights(&c, 13);
    let l = layout(2, 4, 3, 14);
    let opts = PrefillOptions { prune: PruneConfig::Vtw { exit_layer: 2 }, ..Default::default() };
    let vtw = prefill_with(&c, &w, &l, opts).unwrap().logits;
    let skip = deepinsert_prefill(&cfg(4), &w, &l).unwrap().logits;
    assert_eq!(vtw.bits(), skip.bits());
}

#[test]
fn fastv_cost_follows_retained_length() {
    let c = cfg(1);
    let w = weights(&c, 15);
    let l = layout(2, 6, 3, 16);
    let opts = PrefillOptions { prune: PruneConfig::Fastv { start_layer: 2, retention: 0.5 }, ..Default::default() };
    let (out, n) = counter::measure(|| prefill_with(&c, &w, &l, opts).unwrap());
    assert_eq!(out.final_segments.iter().filter(|s| **s == Segment::Multimodal).count(), 3);
    let per_layer = |len: u64| 8 * len * 64 + 4 * len * len * 8 + 4 * len * 8 * 16;
    assert_eq!(n.core_total(), per_layer(5) + per_layer(11) + 2 * per_layer(8));
}
