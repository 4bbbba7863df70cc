use crate::error::{invalid, Result};
use crate::insertion::{prefill_with, PrefillOptions};
use crate::modality::{sample_layout, GridSample};
use crate::numerics::Matrix;
use crate::training::MultimodalModel;

fn check(x: &Matrix, k: usize) -> Result<()> {
    if k == 0 || k >= x.rows() {
        return Err(invalid(format!("need 0 < k < n, got k={k}, n={}", x.rows())));
    }
    if !x.is_finite() {
        return Err(invalid("features contain non-finite values"));
    }
    Ok(())
}

/// For each row, the `k` other rows with the largest inner product;
/// equal similarities go to the lower index.
pub fn knn_indices(x: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    check(x, k)?;
    let n = x.rows();
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>();
    Ok((0..n)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (dot(x.row(i), x.row(j)), j)).collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut idx: Vec<usize> = cand[..k].iter().map(|c| c.1).collect();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// Mean over samples of `|N_a(i) ∩ N_b(i)| / k` with inner-product kernels.
pub fn mutual_knn_alignment(a: &Matrix, b: &Matrix, k: usize) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(invalid(format!("feature sets cover {} and {} samples", a.rows(), b.rows())));
    }
    let na = knn_indices(a, k)?;
    let nb = knn_indices(b, k)?;
    let total: usize = na
        .iter()
        .zip(&nb)
        .map(|(x, y)| x.iter().filter(|i| y.binary_search(i).is_ok()).count())
        .sum();
    Ok(total as f64 / (k * a.rows()) as f64)
}

/// Entry `(i, j)` aligns `a[i]` with `b[j]`.
pub fn alignment_grid(a: &[Matrix], b: &[Matrix], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = a.first().or(b.first()).map(|m| m.rows()).unwrap_or(0);
    if a.iter().chain(b).any(|m| m.rows() != n) {
        return Err(invalid("all layers must cover the same samples"));
    }
    let na: Vec<_> = a.iter().map(|m| knn_indices(m, k)).collect::<Result<_>>()?;
    let nb: Vec<_> = b.iter().map(|m| knn_indices(m, k)).collect::<Result<_>>()?;
    Ok(na
        .iter()
        .map(|x| {
            nb.iter()
                .map(|y| {
                    let hits: usize = x
                        .iter()
                        .zip(y)
                        .map(|(p, q)| p.iter().filter(|i| q.binary_search(i).is_ok()).count())
                        .sum();
                    hits as f64 / (k * n) as f64
                })
                .collect()
        })
        .collect())
}

/// Last-prompt-token output of every block, one `samples × d_model` matrix
/// per block.
pub fn layer_features(model: &MultimodalModel, samples: &[GridSample]) -> Result<Vec<Matrix>> {
    let opts = PrefillOptions { record_layer_outputs: true, ..model.prefill_options() };
    let mut rows: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(samples.len()); model.config.n_layers];
    for s in samples {
        let layout = sample_layout(&model.encoder, &model.adapter, s)?;
        let p = prefill_with(&model.config, &model.weights, &layout, opts)?;
        for (dst, src) in rows.iter_mut().zip(p.layer_outputs) {
            dst.push(src);
        }
    }
    Ok(rows.iter().map(|r| Matrix::from_rows(r)).collect())
}
