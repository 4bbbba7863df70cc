//! One pre-norm transformer block: causal rotary attention and a GELU
//! feed-forward, each wrapped in a residual connection.

use crate::error::{Error, Result};
use crate::numerics::{
    gelu_grad, gelu_matrix, layer_norm_backward, layer_norm_cached, matmul, matmul_at, matmul_bt,
    rope_apply, rope_apply_inverse, softmax_in_place, Component, Matrix, NormCache,
};

use super::{BlockWeights, ModelConfig, NORM_EPS};

/// Rotated keys and values of already-processed tokens for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub positions: Vec<usize>,
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerCache {
    pub fn empty(d_model: usize) -> Self {
        Self { positions: Vec::new(), keys: Matrix::zeros(0, d_model), values: Matrix::zeros(0, d_model) }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Appends rows; caller guarantees positions keep increasing.
    pub(crate) fn append(&mut self, positions: &[usize], keys: &Matrix, values: &Matrix) {
        self.positions.extend_from_slice(positions);
        self.keys = self.keys.vstack(keys).expect("cache width");
        self.values = self.values.vstack(values).expect("cache width");
    }
}

/// Which attention probabilities to hand back from a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    None,
    /// Row of the last query only, per head.
    LastRow,
    /// Full query × key matrix per head.
    Full,
}

/// Attention probabilities from one block, one matrix per head, with the
/// global positions of the keys they range over.
#[derive(Debug, Clone)]
pub struct AttentionProbs {
    pub key_positions: Vec<usize>,
    pub query_positions: Vec<usize>,
    pub heads: Vec<Matrix>,
}

/// Activations kept for the backward pass (cache-free forward only).
#[derive(Debug, Clone)]
pub struct BlockTape {
    positions: Vec<usize>,
    h1: Matrix,
    ln1: NormCache,
    q_rot: Matrix,
    k_rot: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    attn: Matrix,
    h2: Matrix,
    ln2: NormCache,
    pre_act: Matrix,
    act: Matrix,
}

pub(crate) struct BlockRun {
    pub out: Matrix,
    pub new_keys: Matrix,
    pub new_values: Matrix,
    pub probs: Option<AttentionProbs>,
    pub tape: Option<BlockTape>,
}

pub(crate) struct BlockArgs<'a> {
    pub past: Option<&'a LayerCache>,
    /// Rows (over past ++ new) that may neither attend nor be attended to.
    pub excluded: Option<&'a [bool]>,
    pub capture: Capture,
    pub record_tape: bool,
}

impl Default for BlockArgs<'_> {
    fn default() -> Self {
        Self { past: None, excluded: None, capture: Capture::None, record_tape: false }
    }
}

fn check_positions(past: Option<&LayerCache>, positions: &[usize]) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Position(format!("positions not strictly increasing: {positions:?}")));
    }
    if let (Some(cache), Some(&first)) = (past, positions.first()) {
        if let Some(&last) = cache.positions.last() {
            if last >= first {
                return Err(Error::Position(format!(
                    "cached position {last} does not precede new position {first}"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn run_block(
    cfg: &ModelConfig,
    w: &BlockWeights,
    x: &Matrix,
    positions: &[usize],
    args: BlockArgs<'_>,
) -> Result<BlockRun> {
    if x.cols() != cfg.d_model || x.rows() != positions.len() {
        return Err(Error::Shape {
            op: "block_forward",
            detail: format!("input {:?} with {} positions", x.shape(), positions.len()),
        });
    }
    check_positions(args.past, positions)?;
    let dh = cfg.head_dim();
    let (h1, ln1) = layer_norm_cached(x, w.ln1_gain.data(), w.ln1_bias.data(), NORM_EPS)?;
    let q = matmul(&h1, &w.w_q, Component::Projection)?;
    let k = matmul(&h1, &w.w_k, Component::Projection)?;
    let v = matmul(&h1, &w.w_v, Component::Projection)?;
    let q_rot = rope_apply(&q, positions, dh)?;
    let k_rot = rope_apply(&k, positions, dh)?;

    let (keys, values, key_pos) = match args.past {
        Some(c) if !c.is_empty() => {
            let mut kp = c.positions.clone();
            kp.extend_from_slice(positions);
            (c.keys.vstack(&k_rot)?, c.values.vstack(&v)?, kp)
        }
        _ => (k_rot.clone(), v.clone(), positions.to_vec()),
    };
    let n_past = key_pos.len() - positions.len();
    if let Some(ex) = args.excluded {
        if ex.len() != key_pos.len() {
            return Err(Error::Shape {
                op: "block_forward",
                detail: format!("exclusion mask of {} for {} keys", ex.len(), key_pos.len()),
            });
        }
    }

    let scale = 1.0 / (dh as f32).sqrt();
    let mut attn = Matrix::zeros(x.rows(), cfg.d_model);
    let mut head_probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q_rot.col_block(h * dh, dh);
        let kh = keys.col_block(h * dh, dh);
        let vh = values.col_block(h * dh, dh);
        let mut p = matmul_bt(&qh, &kh, Component::AttentionScore)?;
        for i in 0..p.rows() {
            let qpos = positions[i];
            let q_excluded = args.excluded.is_some_and(|ex| ex[n_past + i]);
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                let masked = key_pos[j] > qpos
                    || q_excluded
                    || args.excluded.is_some_and(|ex| ex[j]);
                *s = if masked { f32::NEG_INFINITY } else { *s * scale };
            }
            softmax_in_place(row);
        }
        let oh = matmul(&p, &vh, Component::AttentionValue)?;
        attn.set_col_block(h * dh, &oh);
        head_probs.push(p);
    }
    let a = matmul(&attn, &w.w_o, Component::OutputProjection)?;
    let mut x2 = x.clone();
    x2.add_assign(&a);

    let (h2, ln2) = layer_norm_cached(&x2, w.ln2_gain.data(), w.ln2_bias.data(), NORM_EPS)?;
    let pre_act = matmul(&h2, &w.w_ff1, Component::FeedForward)?;
    let act = gelu_matrix(&pre_act);
    let f = matmul(&act, &w.w_ff2, Component::FeedForward)?;
    let mut out = x2;
    out.add_assign(&f);
    if !out.is_finite() {
        return Err(Error::NonFinite("block output".into()));
    }

    let probs = match args.capture {
        Capture::None => None,
        Capture::LastRow => Some(AttentionProbs {
            key_positions: key_pos.clone(),
            query_positions: positions.last().copied().into_iter().collect(),
            heads: head_probs
                .iter()
                .map(|p| p.select_rows(&[p.rows().saturating_sub(1)]))
                .collect(),
        }),
        Capture::Full => Some(AttentionProbs {
            key_positions: key_pos.clone(),
            query_positions: positions.to_vec(),
            heads: head_probs.clone(),
        }),
    };
    let tape = args.record_tape.then(|| BlockTape {
        positions: positions.to_vec(),
        h1,
        ln1,
        q_rot,
        k_rot: k_rot.clone(),
        v: v.clone(),
        probs: head_probs,
        attn,
        h2,
        ln2,
        pre_act,
        act,
    });
    Ok(BlockRun { out, new_keys: k_rot, new_values: v, probs, tape })
}

/// Backpropagates `dout` through a cache-free block, accumulating parameter
/// gradients into `grads`. Returns the gradient with respect to the input.
pub(crate) fn backward_block(
    cfg: &ModelConfig,
    w: &BlockWeights,
    tape: &BlockTape,
    dout: &Matrix,
    grads: &mut BlockWeights,
) -> Result<Matrix> {
    let tag = Component::Backward;
    let dh = cfg.head_dim();

    // Feed-forward branch.
    let d_act = matmul_bt(dout, &w.w_ff2, tag)?;
    grads.w_ff2.add_assign(&matmul_at(&tape.act, dout, tag)?);
    let mut d_pre = d_act;
    for (g, &u) in d_pre.data_mut().iter_mut().zip(tape.pre_act.data()) {
        *g *= gelu_grad(u);
    }
    grads.w_ff1.add_assign(&matmul_at(&tape.h2, &d_pre, tag)?);
    let d_h2 = matmul_bt(&d_pre, &w.w_ff1, tag)?;
    let (d_x2_norm, dg2, db2) = layer_norm_backward(&d_h2, w.ln2_gain.data(), &tape.ln2);
    accumulate(&mut grads.ln2_gain, &dg2);
    accumulate(&mut grads.ln2_bias, &db2);
    let mut d_x2 = dout.clone();
    d_x2.add_assign(&d_x2_norm);

    // Attention branch.
    grads.w_o.add_assign(&matmul_at(&tape.attn, &d_x2, tag)?);
    let d_attn = matmul_bt(&d_x2, &w.w_o, tag)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let rows = tape.positions.len();
    let mut d_q_rot = Matrix::zeros(rows, cfg.d_model);
    let mut d_k_rot = Matrix::zeros(rows, cfg.d_model);
    let mut d_v = Matrix::zeros(rows, cfg.d_model);
    for h in 0..cfg.n_heads {
        let p = &tape.probs[h];
        let d_oh = d_attn.col_block(h * dh, dh);
        let vh = tape.v.col_block(h * dh, dh);
        let qh = tape.q_rot.col_block(h * dh, dh);
        let kh = tape.k_rot.col_block(h * dh, dh);
        let d_p = matmul_bt(&d_oh, &vh, tag)?;
        d_v.set_col_block(h * dh, &matmul_at(p, &d_oh, tag)?);
        let mut d_s = Matrix::zeros(p.rows(), p.cols());
        for i in 0..p.rows() {
            let pr = p.row(i);
            let dpr = d_p.row(i);
            let dot: f32 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            let out = d_s.row_mut(i);
            for j in 0..pr.len() {
                out[j] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        d_q_rot.set_col_block(h * dh, &matmul(&d_s, &kh, tag)?);
        d_k_rot.set_col_block(h * dh, &matmul_at(&d_s, &qh, tag)?);
    }
    let d_q = rope_apply_inverse(&d_q_rot, &tape.positions, dh)?;
    let d_k = rope_apply_inverse(&d_k_rot, &tape.positions, dh)?;
    grads.w_q.add_assign(&matmul_at(&tape.h1, &d_q, tag)?);
    grads.w_k.add_assign(&matmul_at(&tape.h1, &d_k, tag)?);
    grads.w_v.add_assign(&matmul_at(&tape.h1, &d_v, tag)?);
    let mut d_h1 = matmul_bt(&d_q, &w.w_q, tag)?;
    d_h1.add_assign(&matmul_bt(&d_k, &w.w_k, tag)?);
    d_h1.add_assign(&matmul_bt(&d_v, &w.w_v, tag)?);
    let (d_x_norm, dg1, db1) = layer_norm_backward(&d_h1, w.ln1_gain.data(), &tape.ln1);
    accumulate(&mut grads.ln1_gain, &dg1);
    accumulate(&mut grads.ln1_bias, &db1);
    let mut d_x = d_x2;
    d_x.add_assign(&d_x_norm);
    Ok(d_x)
}

pub(crate) fn accumulate(dst: &mut Matrix, src: &[f32]) {
    for (a, b) in dst.data_mut().iter_mut().zip(src) {
        *a += *b;
    }
}
