use crate::numerics::{Matrix, Rng};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_ff1: Matrix,
    pub w_ff2: Matrix,
}

/// Transformer parameters. The LM head reuses `embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
}

impl BlockWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            w_ff1: Matrix::zeros(d, cfg.d_ff),
            w_ff2: Matrix::zeros(cfg.d_ff, d),
        }
    }

    fn named(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ff1", &self.w_ff1),
            ("w_ff2", &self.w_ff2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 10] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_ff1", &mut self.w_ff1),
            ("w_ff2", &mut self.w_ff2),
        ]
    }
}

impl Weights {
    /// All-zero tensors with the shapes implied by `cfg`; doubles as a gradient buffer.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            embedding: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            blocks: (0..cfg.n_layers).map(|_| BlockWeights::zeros(cfg)).collect(),
            final_gain: Matrix::zeros(1, cfg.d_model),
            final_bias: Matrix::zeros(1, cfg.d_model),
        }
    }

    /// Normal(0, 0.02) init; `w_o` and `w_ff2` are further scaled by
    /// `1/sqrt(2·n_layers)`. Norm gains start at 1, biases at 0.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let std = 0.02f32;
        let out_std = std / ((2 * cfg.n_layers) as f32).sqrt();
        for (name, t) in w.named_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let fill = match leaf {
                "ln1_gain" | "ln2_gain" | "final_gain" => Some(1.0),
                "ln1_bias" | "ln2_bias" | "final_bias" => Some(0.0),
                _ => None,
            };
            match fill {
                Some(v) => t.data_mut().iter_mut().for_each(|x| *x = v),
                None => {
                    let s = if leaf == "w_o" || leaf == "w_ff2" { out_std } else { std };
                    t.data_mut().iter_mut().for_each(|x| *x = rng.normal(s));
                }
            }
        }
        w
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("final_bias".into(), &mut self.final_bias));
        out
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (_, t) in self.named_mut() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data().len()).sum()
    }
}
