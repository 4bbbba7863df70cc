use crate::error::{Error, Result};
use crate::model::accumulate;
use crate::numerics::{gelu_grad, gelu_matrix, matmul, matmul_at, matmul_bt, Component, Matrix, Rng};

use super::{GridSample, GridTask};

/// Seed of the perceptual encoder. Changing it changes every feature.
pub const ENCODER_SEED: u64 = 0x00E1_C0DE_F20E;

/// Fixed random encoder: a per-symbol code passed through a fixed random
/// projection. Never trained. Features carry no coordinates; a cell's
/// location is known only from the position its token occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    symbol_codes: Matrix,
    projection: Matrix,
}

impl FrozenEncoder {
    pub fn new(task: &GridTask, d_enc: usize) -> Self {
        assert!(d_enc > 0, "d_enc must be positive");
        let mut rng = Rng::new(ENCODER_SEED);
        let mut fill = |rows: usize, cols: usize, std: f32| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(std)).collect()).unwrap()
        };
        let symbol_codes = fill(task.symbols, d_enc, 1.0);
        let projection = fill(d_enc, d_enc, 1.0 / (d_enc as f32).sqrt());
        Self { symbol_codes, projection }
    }

    pub fn d_enc(&self) -> usize {
        self.projection.cols()
    }

    /// One feature row per cell, row-major.
    pub fn encode(&self, sample: &GridSample) -> Matrix {
        // Plain loop: the encoder sits outside the counted model.
        let mut out = Matrix::zeros(sample.grid.len().pow(2), self.d_enc());
        for (i, sym) in sample.cells().enumerate() {
            for (&x, k) in self.symbol_codes.row(sym).iter().zip(0..) {
                for (o, &p) in out.row_mut(i).iter_mut().zip(self.projection.row(k)) {
                    *o += x * p;
                }
            }
        }
        out
    }

    /// Bitwise checksum of the encoder tables.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in [&self.symbol_codes, &self.projection] {
            for b in m.bits() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Trainable two-layer map from encoder features to the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone)]
pub struct AdapterTape {
    features: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl Adapter {
    pub fn zeros(d_enc: usize, d_hidden: usize, d_model: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_enc, d_hidden),
            b1: Matrix::zeros(1, d_hidden),
            w2: Matrix::zeros(d_hidden, d_model),
            b2: Matrix::zeros(1, d_model),
        }
    }

    pub fn init(d_enc: usize, d_hidden: usize, d_model: usize, rng: &mut Rng) -> Self {
        let mut a = Self::zeros(d_enc, d_hidden, d_model);
        let s1 = 1.0 / (d_enc as f32).sqrt();
        let s2 = 1.0 / (d_hidden as f32).sqrt();
        a.w1.data_mut().iter_mut().for_each(|v| *v = rng.normal(s1));
        a.w2.data_mut().iter_mut().for_each(|v| *v = rng.normal(s2));
        a
    }

    pub fn d_enc(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w2.cols()
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("adapter.w1".into(), &self.w1),
            ("adapter.b1".into(), &self.b1),
            ("adapter.w2".into(), &self.w2),
            ("adapter.b2".into(), &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("adapter.w1".into(), &mut self.w1),
            ("adapter.b1".into(), &mut self.b1),
            ("adapter.w2".into(), &mut self.w2),
            ("adapter.b2".into(), &mut self.b2),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w1.rows(), self.w1.cols(), self.w2.cols())
    }

    pub fn add_assign(&mut self, other: &Adapter) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (_, t) in self.named_mut() {
            t.scale(s);
        }
    }

    /// Multimodal embeddings, `features.rows × d_model`.
    pub fn adapt(&self, features: &Matrix) -> Result<Matrix> {
        self.forward(features).map(|(m, _)| m)
    }

    pub fn forward(&self, features: &Matrix) -> Result<(Matrix, AdapterTape)> {
        if features.cols() != self.d_enc() {
            return Err(Error::Shape {
                op: "adapt",
                detail: format!("feature width {} vs adapter input {}", features.cols(), self.d_enc()),
            });
        }
        let mut pre = matmul(features, &self.w1, Component::Adapter)?;
        add_bias(&mut pre, &self.b1);
        let act = gelu_matrix(&pre);
        let mut out = matmul(&act, &self.w2, Component::Adapter)?;
        add_bias(&mut out, &self.b2);
        Ok((out, AdapterTape { features: features.clone(), pre, act }))
    }

    /// Accumulates parameter gradients; features receive none.
    pub fn backward(&self, tape: &AdapterTape, d_out: &Matrix, grads: &mut Adapter) -> Result<()> {
        let tag = Component::Backward;
        grads.w2.add_assign(&matmul_at(&tape.act, d_out, tag)?);
        accumulate(&mut grads.b2, &column_sums(d_out));
        let mut d_pre = matmul_bt(d_out, &self.w2, tag)?;
        for (g, &u) in d_pre.data_mut().iter_mut().zip(tape.pre.data()) {
            *g *= gelu_grad(u);
        }
        grads.w1.add_assign(&matmul_at(&tape.features, &d_pre, tag)?);
        accumulate(&mut grads.b1, &column_sums(&d_pre));
        Ok(())
    }
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += *v;
        }
    }
    out
}
