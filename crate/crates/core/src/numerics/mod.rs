//! Dense kernels: matrix products with mul-add accounting, softmax, layer
//! norm, rotary embeddings, cross-entropy and Adam.
//!
//! Every kernel sums in a fixed sequential order, so identical inputs give
//! bitwise-identical outputs regardless of how many rows a call carries.

mod adam;
pub mod counter;
mod matrix;
mod ops;
mod rng;

pub use adam::{adam_step, AdamConfig, MomentState};
pub use counter::{Component, OpCounter};
pub use matrix::Matrix;
pub use ops::{
    cross_entropy, cross_entropy_with_grad, gelu, gelu_grad, gelu_matrix, layer_norm,
    layer_norm_backward, layer_norm_cached, matmul, matmul_at, matmul_bt, rope_apply,
    rope_apply_inverse, softmax_rows, NormCache, ROPE_BASE,
};
pub(crate) use ops::softmax_in_place;
pub use rng::Rng;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let data = (0..rows * cols).map(|_| rng.normal(1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &a, Component::Projection).unwrap(), a);
        let c = matmul(&a, &b, Component::Projection).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_counts_two_mnk() {
        let a = Matrix::identity(2);
        let (_, n) = counter::measure(|| matmul(&a, &a, Component::FeedForward).unwrap());
        assert_eq!(n.get(Component::FeedForward), 16);
        assert_eq!(n.total(), 16);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let err = matmul(&a, &a, Component::Projection).unwrap_err();
        assert!(err.to_string().contains("(2x3) · (2x3)"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = random(3, 5, 1);
        let b = random(4, 5, 2);
        let c = random(3, 4, 3);
        let bt = matmul_bt(&a, &b, Component::Backward).unwrap();
        let direct = matmul(&a, &b.transpose(), Component::Backward).unwrap();
        assert_eq!(bt.bits(), direct.bits());
        let at = matmul_at(&a, &c, Component::Backward).unwrap();
        let direct = matmul(&a.transpose(), &c, Component::Backward).unwrap();
        assert_eq!(at.bits(), direct.bits());
        // Shapes that exercise the four-row blocks and their remainders.
        let (a, c) = (random(7, 9, 4), random(7, 13, 5));
        let at = matmul_at(&a, &c, Component::Backward).unwrap();
        assert_eq!(at.bits(), matmul(&a.transpose(), &c, Component::Backward).unwrap().bits());
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]);
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-6 && s.get(1, 1) < 1e-6);
        let r = softmax_rows(&random(4, 4, 9)).unwrap();
        for i in 0..4 {
            let sum: f64 = r.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
        let nan = Matrix::from_rows(&[vec![f32::NAN, 0.0]]);
        assert!(softmax_rows(&nan).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let x = Matrix::from_rows(&[vec![3.0; 4]]);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = random(2, 6, 4);
        let bias = [0.1, -0.2, 0.3, 0.0, 0.5, 1.0];
        let y = layer_norm(&x, &[0.0; 6], &bias, 1e-5).unwrap();
        assert_eq!(y.row(1), &bias);

        // Moment oracle: gain g, bias b => mean b, variance g^2 (uniform affine).
        let x = random(1, 64, 5);
        let y = layer_norm(&x, &[1.5; 64], &[0.25; 64], 1e-6).unwrap();
        let mean: f64 = y.row(0).iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var: f64 = y.row(0).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!((mean - 0.25).abs() < 1e-5);
        assert!((var - 2.25).abs() < 1e-4, "var {var}");

        assert!(layer_norm(&x, &[1.0; 64], &[0.0; 64], 0.0).is_err());
        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 64], 1e-5).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = random(2, 5, 11);
        let gain: Vec<f32> = (0..5).map(|i| 0.5 + i as f32 * 0.3).collect();
        let bias = vec![0.1; 5];
        let w = random(2, 5, 12);
        let loss = |x: &Matrix| -> f64 {
            let y = layer_norm(x, &gain, &bias, 1e-5).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = layer_norm_cached(&x, &gain, &bias, 1e-5).unwrap();
        let (dx, _, _) = layer_norm_backward(&w, &gain, &cache);
        for idx in 0..10 {
            let h = 1e-2;
            let mut p = x.clone();
            p.data_mut()[idx] += h;
            let mut m = x.clone();
            m.data_mut()[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h as f64);
            assert!((fd - dx.data()[idx] as f64).abs() < 2e-3, "{idx}: {fd} vs {}", dx.data()[idx]);
        }
    }

    #[test]
    fn rope_examples() {
        let x = random(1, 8, 6);
        assert_eq!(rope_apply(&x, &[0], 8).unwrap(), x);
        let pair = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let r = rope_apply(&pair, &[1], 2).unwrap();
        assert!((r.get(0, 0) - 1f32.cos()).abs() < 1e-7);
        assert!((r.get(0, 1) - 1f32.sin()).abs() < 1e-7);
        assert!(rope_apply(&Matrix::zeros(1, 3), &[0], 3).is_err());
        let back = rope_apply_inverse(&rope_apply(&x, &[17], 4).unwrap(), &[17], 4).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    proptest! {
        #[test]
        fn rope_inner_product_depends_on_offset_only(p1 in 0usize..200, p2 in 0usize..200, s in 0usize..200, seed in 0u64..1000) {
            let q = random(1, 8, seed);
            let k = random(1, 8, seed + 1);
            let a = dot(rope_apply(&q, &[p1], 8).unwrap().row(0), rope_apply(&k, &[p2], 8).unwrap().row(0));
            let b = dot(rope_apply(&q, &[p1 + s], 8).unwrap().row(0), rope_apply(&k, &[p2 + s], 8).unwrap().row(0));
            prop_assert!((a - b).abs() < 1e-5 * (1.0 + a.abs()));
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e4f32..1e4, 12)) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let s = softmax_rows(&m).unwrap();
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn counter_equals_sum_of_products(shapes in proptest::collection::vec((1usize..6, 1usize..6, 1usize..6), 1..6)) {
            counter::reset();
            let mut expect = 0u64;
            for (i, &(m, k, n)) in shapes.iter().enumerate() {
                let tag = Component::CORE[i % 5];
                matmul(&Matrix::zeros(m, k), &Matrix::zeros(k, n), tag).unwrap();
                expect += 2 * (m * n * k) as u64;
            }
            prop_assert_eq!(counter::snapshot().core_total(), expect);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 7;
        let logits = Matrix::zeros(2, v);
        let l = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((l - (v as f32).ln()).abs() < 1e-6);
        let mut sharp = Matrix::zeros(1, 4);
        sharp.set(0, 2, 1000.0);
        assert!(cross_entropy(&sharp, &[2]).unwrap().abs() < 1e-6);
        assert!(cross_entropy(&sharp, &[4]).is_err());

        let logits = random(3, 5, 21);
        let targets = [4, 0, 2];
        let naive: f64 = (0..3)
            .map(|i| {
                let row = logits.row(i);
                let z: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
                -((row[targets[i]] as f64).exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((cross_entropy(&logits, &targets).unwrap() as f64 - naive).abs() < 1e-6);
    }

    #[test]
    fn adam_examples() {
        let hyper = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut p = vec![1.0, -2.0];
        let mut st = MomentState::new(2);
        adam_step("w", &mut p, &[0.0, 0.0], &mut st, &hyper, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0, -2.0];
        let mut st = MomentState::new(2);
        adam_step("w", &mut p, &[0.3, -5.0], &mut st, &hyper, 1).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);

        // Scalar recurrence simulated in f64.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let grads = [0.5f64, -0.25];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![1.0f32];
        let mut st = MomentState::new(1);
        adam_step("s", &mut p, &[0.5], &mut st, &hyper, 1).unwrap();
        adam_step("s", &mut p, &[-0.25], &mut st, &hyper, 2).unwrap();
        assert!((p[0] as f64 - x).abs() < 1e-6, "{} vs {x}", p[0]);

        let err = adam_step("blocks.0.w_q", &mut p, &[f32::NAN], &mut st, &hyper, 3).unwrap_err();
        assert!(err.to_string().contains("blocks.0.w_q"));
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f32> = (0..10).map(|_| a.normal(1.0)).collect();
        let ys: Vec<f32> = (0..10).map(|_| b.normal(1.0)).collect();
        assert_eq!(xs, ys);
        assert!(a.position() > 0);
    }
}
