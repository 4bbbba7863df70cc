use super::counter::{self, Component};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Writes `a · b` into `out`. Each output element is accumulated from zero
/// over `k` in index order, so the result is independent of the row blocking.
fn gemm_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (m, kdim, n) = (a.rows(), a.cols(), b.cols());
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = od[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        // Equal-length slices let the compiler drop bounds checks and vectorize over j.
        let (o0, o1, o2, o3) = (&mut o0[..n], &mut o1[..n], &mut o2[..n], &mut o3[..n]);
        let (r0, r1, r2, r3) = (
            &ad[i * kdim..][..kdim],
            &ad[(i + 1) * kdim..][..kdim],
            &ad[(i + 2) * kdim..][..kdim],
            &ad[(i + 3) * kdim..][..kdim],
        );
        for k in 0..kdim {
            let (a0, a1, a2, a3) = (r0[k], r1[k], r2[k], r3[k]);
            let brow = &bd[k * n..][..n];
            for j in 0..n {
                let bkj = brow[j];
                o0[j] += a0 * bkj;
                o1[j] += a1 * bkj;
                o2[j] += a2 * bkj;
                o3[j] += a3 * bkj;
            }
        }
        i += 4;
    }
    for r in i..m {
        let orow = &mut od[r * n..(r + 1) * n];
        for k in 0..kdim {
            let aik = ad[r * kdim + k];
            for (o, &bkj) in orow.iter_mut().zip(&bd[k * n..(k + 1) * n]) {
                *o += aik * bkj;
            }
        }
    }
}

/// Writes `aᵀ · b` into `out` without materializing `aᵀ`; each element is
/// accumulated over the shared row index in order, exactly as [`gemm_into`]
/// would on the explicit transpose.
fn gemm_at_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (rows, m, n) = (a.rows(), a.cols(), b.cols());
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for r in 0..rows {
        let arow = &ad[r * m..][..m];
        let brow = &bd[r * n..][..n];
        for (i, &a_ri) in arow.iter().enumerate() {
            let orow = &mut od[i * n..][..n];
            for (o, &b_rj) in orow.iter_mut().zip(brow) {
                *o += a_ri * b_rj;
            }
        }
    }
}

fn count(tag: Component, m: usize, n: usize, k: usize) {
    counter::record(tag, 2 * (m as u64) * (n as u64) * (k as u64));
}

/// `a · b`, attributing `2·m·n·k` mul-adds to `tag`.
pub fn matmul(a: &Matrix, b: &Matrix, tag: Component) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("({}x{}) · ({}x{})", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    gemm_into(a, b, &mut out);
    count(tag, a.rows(), b.cols(), a.cols());
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_bt(a: &Matrix, b: &Matrix, tag: Component) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "matmul_bt",
            detail: format!("({}x{}) · ({}x{})ᵀ", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let bt = b.transpose();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    gemm_into(a, &bt, &mut out);
    count(tag, a.rows(), b.rows(), a.cols());
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Matrix, b: &Matrix, tag: Component) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "matmul_at",
            detail: format!("({}x{})ᵀ · ({}x{})", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    gemm_at_into(a, b, &mut out);
    count(tag, a.cols(), b.cols(), a.rows());
    Ok(out)
}

/// Row-wise softmax with max subtraction. `-inf` entries are treated as
/// masked and receive exactly zero probability.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("softmax input row {i}")));
        }
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Normalized activations and per-row inverse std, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f32>,
}

pub fn layer_norm(x: &Matrix, gain: &[f32], bias: &[f32], eps: f32) -> Result<Matrix> {
    layer_norm_cached(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached(
    x: &Matrix,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> Result<(Matrix, NormCache)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
    }
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: format!("gain {} / bias {} for width {}", gain.len(), bias.len(), x.cols()),
        });
    }
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xhat.get(i, j) * gain[j] + bias[j];
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(dy: &Matrix, gain: &[f32], cache: &NormCache) -> (Matrix, Vec<f32>, Vec<f32>) {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dxhat = vec![0.0f32; d];
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dbias[j] += g[j];
            dxhat[j] = g[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f32>() / d as f32;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
        let r = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn fast_tanh(z: f32) -> f32 {
    let z = z.clamp(-15.0, 15.0);
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(inner);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_matrix(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    out
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates each consecutive `(2j, 2j+1)` pair of every `head_dim`-wide block
/// by `position · base^(-2j/head_dim)`.
pub fn rope_apply(x: &Matrix, positions: &[usize], head_dim: usize) -> Result<Matrix> {
    rope_rotate(x, positions, head_dim, 1.0)
}

/// Inverse rotation; the adjoint of [`rope_apply`].
pub fn rope_apply_inverse(x: &Matrix, positions: &[usize], head_dim: usize) -> Result<Matrix> {
    rope_rotate(x, positions, head_dim, -1.0)
}

fn rope_rotate(x: &Matrix, positions: &[usize], head_dim: usize, sign: f64) -> Result<Matrix> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("rope head_dim must be even, got {head_dim}")));
    }
    if x.cols() % head_dim != 0 {
        return Err(Error::Shape {
            op: "rope_apply",
            detail: format!("width {} not a multiple of head_dim {head_dim}", x.cols()),
        });
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape {
            op: "rope_apply",
            detail: format!("{} positions for {} rows", positions.len(), x.rows()),
        });
    }
    let half = head_dim / 2;
    let thetas: Vec<f64> = (0..half)
        .map(|j| ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    let mut out = x.clone();
    for (i, &pos) in positions.iter().enumerate() {
        let trig: Vec<(f32, f32)> = thetas
            .iter()
            .map(|t| {
                let a = sign * pos as f64 * t;
                (a.cos() as f32, a.sin() as f32)
            })
            .collect();
        let row = out.row_mut(i);
        for block in row.chunks_exact_mut(head_dim) {
            for (j, &(c, s)) in trig.iter().enumerate() {
                let (a, b) = (block[2 * j], block[2 * j + 1]);
                block[2 * j] = a * c - b * s;
                block[2 * j + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f32> {
    cross_entropy_with_grad(logits, targets).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Matrix, targets: &[usize]) -> Result<(f32, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("{} targets for {} rows", targets.len(), logits.rows()),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "target {t} outside vocabulary of {}",
            logits.cols()
        )));
    }
    let n = logits.rows().max(1) as f32;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += (lse - row[t]) as f64;
        let g = grad.row_mut(i);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - lse).exp() / n;
        }
        g[t] -= 1.0 / n;
    }
    Ok(((total / n as f64) as f32, grad))
}
