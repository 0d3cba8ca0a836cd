//! Relative data-fidelity loss plus a singular-value consistency penalty on
//! the per-patch N³×3 parameter matrix, with analytic gradients.
//!
//! The SVD is taken through the 3×3 Gram matrix `AᵀA`: its eigenvectors are
//! the right singular vectors, `σ_k = ‖A v_k‖` and `u_k = A v_k / σ_k`.

use serde::{Deserialize, Serialize};

use crate::eigen::eigen3_sym;
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const SIGMA_EPS: f64 = 1e-12;

/// Row-major N³×3 matrix whose columns are the vectorized FA, MD and AD maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    data: Vec<f64>,
}

impl ParamMatrix {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if !data.len().is_multiple_of(3) || data.is_empty() {
            return Err(Error::Shape {
                expected: "a non-empty multiple of 3 entries (rows x 3)".into(),
                actual: format!("{} entries", data.len()),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter matrix".into()));
        }
        Ok(ParamMatrix { data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / 3
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * 3 + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    /// Descending, non-negative.
    pub values: [f64; 3],
    /// Orthonormal right singular vectors.
    pub right: [[f64; 3]; 3],
    /// Left singular vectors (length = rows). Entries whose singular value is
    /// numerically zero are completed to an orthonormal set.
    pub left: [Vec<f64>; 3],
    /// Whether `left[k]` is `A v_k / σ_k` rather than a completion vector.
    pub left_defined: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_term: f64,
    pub reg_term: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(data_term: f64, reg_term: f64, lambda: f64) -> Self {
        LossBreakdown {
            data_term,
            reg_term,
            lambda,
            total: data_term + lambda * reg_term,
        }
    }
}

fn gram(a: &[f64]) -> [f64; 6] {
    let mut g = [0.0; 6];
    for r in a.chunks_exact(3) {
        g[0] += r[0] * r[0];
        g[1] += r[1] * r[1];
        g[2] += r[2] * r[2];
        g[3] += r[0] * r[1];
        g[4] += r[0] * r[2];
        g[5] += r[1] * r[2];
    }
    g
}

fn mat_vec(a: &[f64], v: &[f64; 3]) -> Vec<f64> {
    a.chunks_exact(3).map(|r| r[0] * v[0] + r[1] * v[1] + r[2] * v[2]).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Orthonormal completion: the first standard basis vector that survives
/// Gram–Schmidt against `basis`.
fn complete(basis: &[&Vec<f64>], rows: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    for e in 0..rows {
        let mut x = vec![0.0; rows];
        x[e] = 1.0;
        for b in basis {
            let p: f64 = x.iter().zip(b.iter()).map(|(a, b)| a * b).sum();
            x.iter_mut().zip(b.iter()).for_each(|(xi, bi)| *xi -= p * bi);
        }
        let n = norm(&x);
        if n > 0.5 {
            x.iter_mut().for_each(|v| *v /= n);
            return x;
        }
        if best.as_ref().is_none_or(|b| norm(b) < n) {
            best = Some(x);
        }
    }
    let mut x = best.unwrap_or_else(|| vec![0.0; rows]);
    let n = norm(&x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    x
}

/// SVD of a row-major `rows × 3` slice.
pub fn svd_3col_slice(a: &[f64]) -> SingularTriple {
    let rows = a.len() / 3;
    let es = eigen3_sym(&gram(a));
    let mut triples: Vec<(f64, [f64; 3], Vec<f64>)> = es
        .vectors
        .iter()
        .map(|v| {
            let av = mat_vec(a, v);
            (norm(&av), *v, av)
        })
        .collect();
    triples.sort_by(|x, y| y.0.total_cmp(&x.0));
    let cutoff = SIGMA_EPS * triples[0].0;
    let values = [triples[0].0, triples[1].0, triples[2].0];
    let right = [triples[0].1, triples[1].1, triples[2].1];
    let mut left_defined = [false; 3];
    let mut left: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for k in 0..3 {
        if values[k] > cutoff && values[k] > 0.0 {
            left[k] = triples[k].2.iter().map(|x| x / values[k]).collect();
            left_defined[k] = true;
        }
    }
    for k in 0..3 {
        if !left_defined[k] {
            let basis: Vec<&Vec<f64>> = (0..3).filter(|&j| !left[j].is_empty()).map(|j| &left[j]).collect();
            left[k] = complete(&basis, rows);
        }
    }
    SingularTriple {
        values,
        right,
        left,
        left_defined,
    }
}

pub fn svd_3col(matrix: &ParamMatrix) -> SingularTriple {
    svd_3col_slice(matrix.as_slice())
}

/// Loss and gradient with respect to `pred` for row-major `rows × 3` slices.
pub fn loss_and_grad_slices(pred: &[f64], gt: &[f64], lambda: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    if pred.len() != gt.len() || !pred.len().is_multiple_of(3) {
        return Err(Error::Shape {
            expected: format!("prediction matching ground truth ({} entries)", gt.len()),
            actual: format!("{} entries", pred.len()),
        });
    }
    let gt_sq: f64 = gt.iter().map(|x| x * x).sum();
    if gt_sq == 0.0 {
        return Err(Error::DegeneratePatch);
    }
    let diff_sq: f64 = pred.iter().zip(gt).map(|(p, g)| (g - p).powi(2)).sum();
    let data_term = diff_sq / gt_sq;
    let mut grad: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| -2.0 * (g - p) / gt_sq).collect();

    let s_gt = svd_3col_slice(gt);
    let s_pred = svd_3col_slice(pred);
    let sig_gt_sq: f64 = s_gt.values.iter().map(|s| s * s).sum();
    let reg_num: f64 = (0..3).map(|k| (s_gt.values[k] - s_pred.values[k]).powi(2)).sum();
    let reg_term = reg_num / sig_gt_sq;

    if lambda != 0.0 {
        for k in 0..3 {
            let (sg, sp) = (s_gt.values[k], s_pred.values[k]);
            if sg < 1e-12 && sp < 1e-12 {
                continue;
            }
            let coeff = lambda * -2.0 * (sg - sp) / sig_gt_sq;
            let u = &s_pred.left[k];
            let v = &s_pred.right[k];
            for (r, ur) in u.iter().enumerate() {
                let cu = coeff * ur;
                grad[r * 3] += cu * v[0];
                grad[r * 3 + 1] += cu * v[1];
                grad[r * 3 + 2] += cu * v[2];
            }
        }
    }
    Ok((LossBreakdown::new(data_term, reg_term, lambda), grad))
}

/// `‖gt − pred‖²_F / ‖gt‖²_F + λ · ‖σ_gt − σ_pred‖² / ‖σ_gt‖²` and its gradient
/// with respect to `pred` (same layout as `pred`).
pub fn loss_and_grad(pred: &ParamMatrix, gt: &ParamMatrix, lambda: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    loss_and_grad_slices(pred.as_slice(), gt.as_slice(), lambda)
}

/// Equal-weight mean over a batch; each gradient is scaled by `1 / batch`.
pub fn batch_loss(preds: &[ParamMatrix], gts: &[ParamMatrix], lambda: f64) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if preds.len() != gts.len() {
        return Err(Error::Shape {
            expected: format!("{} predictions", gts.len()),
            actual: format!("{}", preds.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = preds.len() as f64;
    let mut data = 0.0;
    let mut reg = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let (l, mut gr) = loss_and_grad(p, g, lambda)?;
        data += l.data_term;
        reg += l.reg_term;
        gr.iter_mut().for_each(|x| *x /= n);
        grads.push(gr);
    }
    Ok((LossBreakdown::new(data / n, reg / n, lambda), grads))
}
