//! Double-precision sample loss written independently of the library's
//! two-phase path: one full-length sequence in which multimodal rows are
//! masked out and pinned to their adapter output below the insertion layer.

use std::collections::HashMap;

use deepinsert::model::{ModelConfig, Weights};
use deepinsert::modality::{Adapter, GridSample, IMG};
use deepinsert::numerics::Matrix;

#[derive(Clone)]
pub struct T {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl T {
    fn from(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.data().iter().map(|&v| v as f64).collect() }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matmul(&self, b: &T) -> T {
        assert_eq!(self.cols, b.rows);
        let mut out = T::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for j in 0..b.cols {
                    out.data[i * b.cols + j] += a * b.data[k * b.cols + j];
                }
            }
        }
        out
    }
}

/// All trainable tensors, in the order of `Grads::named`.
pub type Params = Vec<(String, T)>;

pub fn params(w: &Weights, adapter: &Adapter) -> Params {
    w.named().into_iter().chain(adapter.named()).map(|(n, m)| (n, T::from(m))).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(x: &T, gain: &T, bias: &T) -> T {
    let mut out = T::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let r = x.row(i);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..x.cols {
            out.data[i * x.cols + j] = (r[j] - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    out
}

fn rope(x: &mut T, positions: &[usize], head_dim: usize) {
    for (i, &p) in positions.iter().enumerate() {
        for h in 0..x.cols / head_dim {
            for j in 0..head_dim / 2 {
                let angle = p as f64 * 10_000f64.powf(-2.0 * j as f64 / head_dim as f64);
                let (s, c) = angle.sin_cos();
                let base = i * x.cols + h * head_dim + 2 * j;
                let (a, b) = (x.data[base], x.data[base + 1]);
                x.data[base] = a * c - b * s;
                x.data[base + 1] = a * s + b * c;
            }
        }
    }
}

fn block(cfg: &ModelConfig, p: &HashMap<&str, &T>, layer: usize, x: &T, positions: &[usize], hidden: &[bool]) -> T {
    let get = |n: &str| p[format!("blocks.{layer}.{n}").as_str()];
    let dh = cfg.d_model / cfg.n_heads;
    let h1 = layer_norm(x, get("ln1_gain"), get("ln1_bias"));
    let mut q = h1.matmul(get("w_q"));
    let mut k = h1.matmul(get("w_k"));
    let v = h1.matmul(get("w_v"));
    rope(&mut q, positions, dh);
    rope(&mut k, positions, dh);
    let mut attn = T::zeros(x.rows, cfg.d_model);
    for i in (0..x.rows).filter(|&i| !hidden[i]) {
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let keys: Vec<usize> = (0..x.rows).filter(|&j| !hidden[j] && positions[j] <= positions[i]).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q.data[i * cfg.d_model + c] * k.data[j * cfg.d_model + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (&j, s) in keys.iter().zip(&scores) {
                let pj = (s - max).exp() / z;
                for c in cols.clone() {
                    attn.data[i * cfg.d_model + c] += pj * v.data[j * cfg.d_model + c];
                }
            }
        }
    }
    let mut x2 = x.clone();
    for (a, b) in x2.data.iter_mut().zip(&attn.matmul(get("w_o")).data) {
        *a += b;
    }
    let mut act = layer_norm(&x2, get("ln2_gain"), get("ln2_bias")).matmul(get("w_ff1"));
    act.data.iter_mut().for_each(|v| *v = gelu(*v));
    for (a, b) in x2.data.iter_mut().zip(&act.matmul(get("w_ff2")).data) {
        *a += b;
    }
    x2
}

/// Cross-entropy of the answer token at the last prompt position.
pub fn loss(cfg: &ModelConfig, params: &Params, features: &Matrix, sample: &GridSample) -> f64 {
    let p: HashMap<&str, &T> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut pre = T::from(features).matmul(p["adapter.w1"]);
    for i in 0..pre.rows {
        for j in 0..pre.cols {
            let v = &mut pre.data[i * pre.cols + j];
            *v = gelu(*v + p["adapter.b1"].data[j]);
        }
    }
    let mut mm = pre.matmul(p["adapter.w2"]);
    for i in 0..mm.rows {
        for j in 0..mm.cols {
            mm.data[i * mm.cols + j] += p["adapter.b2"].data[j];
        }
    }

    let emb = p["embedding"];
    let d = cfg.d_model;
    let mut x = T::zeros(0, d);
    let mut is_mm = Vec::new();
    for &tok in &sample.question_tokens {
        if tok == IMG {
            x.data.extend_from_slice(&mm.data);
            is_mm.extend(std::iter::repeat(true).take(mm.rows));
        } else {
            x.data.extend_from_slice(emb.row(tok));
            is_mm.push(false);
        }
    }
    x.rows = is_mm.len();
    let positions: Vec<usize> = (0..x.rows).collect();
    let none = vec![false; x.rows];
    for layer in 0..cfg.n_layers {
        let below = layer < cfg.insert_layer;
        x = block(cfg, &p, layer, &x, &positions, if below { &is_mm } else { &none });
        if below {
            let mut k = 0;
            for i in (0..x.rows).filter(|&i| is_mm[i]) {
                x.data[i * d..(i + 1) * d].copy_from_slice(mm.row(k));
                k += 1;
            }
        }
    }
    let last = T { rows: 1, cols: d, data: x.row(x.rows - 1).to_vec() };
    let h = layer_norm(&last, p["final_gain"], p["final_bias"]);
    let logits: Vec<f64> = (0..emb.rows).map(|t| h.data.iter().zip(emb.row(t)).map(|(a, b)| a * b).sum()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[sample.answer_token]
}
