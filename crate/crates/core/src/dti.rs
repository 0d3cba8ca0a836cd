//! Log-linear ordinary least squares tensor fitting and the FA/MD/AD maps
//! derived from it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{eigen3_sym, Sym3};
use crate::error::{Error, Result};
use crate::phantom::TensorField;
use crate::types::{DwiVolume, GradientScheme, MetricMaps};

/// Signals are clamped to this fraction of the voxel's b0 before the log.
pub const SIGNAL_FLOOR: f64 = 1e-8;

/// Design matrices with a larger (estimated) condition number are rejected.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fitted_voxels: usize,
    /// Voxels dropped from the output mask (no positive b0 signal).
    pub flagged_voxels: usize,
    /// Voxels where at least one signal hit the floor.
    pub clamped_voxels: usize,
    pub condition_estimate: f64,
    /// RMS log-signal residual, averaged over fitted voxels.
    pub mean_log_residual: f64,
    pub max_log_residual: f64,
}

/// Least-squares solver for the seven log-linear unknowns
/// `[ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`.
#[derive(Debug, Clone)]
pub struct OlsDesign {
    rows: Vec<[f64; 7]>,
    /// 7×D pseudo-inverse, row-major.
    pinv: Vec<[f64; 7]>,
    condition: f64,
}

impl OlsDesign {
    pub fn new(scheme: &GradientScheme) -> Result<Self> {
        scheme.require_b0()?;
        let rows: Vec<[f64; 7]> = scheme
            .bvals()
            .iter()
            .zip(scheme.bvecs())
            .map(|(&b, g)| {
                [
                    1.0,
                    -b * g[0] * g[0],
                    -b * g[1] * g[1],
                    -b * g[2] * g[2],
                    -2.0 * b * g[0] * g[1],
                    -2.0 * b * g[0] * g[2],
                    -2.0 * b * g[1] * g[2],
                ]
            })
            .collect();
        let m = rows.len();
        if m < 7 {
            return Err(Error::RankDeficient { condition: f64::INFINITY });
        }
        // Column equilibration, then Householder QR.
        let mut scale = [0.0f64; 7];
        for r in &rows {
            for j in 0..7 {
                scale[j] += r[j] * r[j];
            }
        }
        let scale = scale.map(|s| if s > 0.0 { s.sqrt() } else { 1.0 });
        let mut a: Vec<[f64; 7]> = rows.iter().map(|r| std::array::from_fn(|j| r[j] / scale[j])).collect();
        // q accumulates Qᵀ applied to the identity (m×m).
        let mut qt: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| (i == j) as u8 as f64).collect()).collect();
        for k in 0..7 {
            let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::RankDeficient { condition: f64::INFINITY });
            }
            let alpha = if a[k][k] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            for j in 0..7 {
                let s: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..m {
                    a[i][j] -= s * v[i - k];
                }
            }
            for col in 0..m {
                let s: f64 = (k..m).map(|i| v[i - k] * qt[i][col]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..m {
                    qt[i][col] -= s * v[i - k];
                }
            }
        }
        let diag: Vec<f64> = (0..7).map(|k| a[k][k].abs()).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RankDeficient { condition });
        }
        // pinv = S⁻¹ R⁻¹ (Qᵀ)[0..7, :]
        let mut pinv = vec![[0.0; 7]; m];
        for col in 0..m {
            let mut x = [0.0; 7];
            for k in (0..7).rev() {
                let mut s = qt[k][col];
                for j in k + 1..7 {
                    s -= a[k][j] * x[j];
                }
                x[k] = s / a[k][k];
            }
            for k in 0..7 {
                pinv[col][k] = x[k] / scale[k];
            }
        }
        Ok(OlsDesign { rows, pinv, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves for the unknowns given log-signals.
    pub fn solve(&self, log_signal: &[f64]) -> [f64; 7] {
        let mut x = [0.0; 7];
        for (row, &y) in self.pinv.iter().zip(log_signal) {
            for k in 0..7 {
                x[k] += row[k] * y;
            }
        }
        x
    }

    fn rms_residual(&self, x: &[f64; 7], log_signal: &[f64]) -> f64 {
        let ss: f64 = self
            .rows
            .iter()
            .zip(log_signal)
            .map(|(r, &y)| {
                let pred: f64 = (0..7).map(|k| r[k] * x[k]).sum();
                (y - pred).powi(2)
            })
            .sum();
        (ss / log_signal.len() as f64).sqrt()
    }
}

struct VoxelFit {
    tensor: Sym3,
    s0: f64,
    clamped: bool,
    residual: f64,
}

/// Fits a diffusion tensor at every masked-in voxel.
pub fn fit_tensor_ols(volume: &DwiVolume) -> Result<(TensorField, FitReport)> {
    let scheme = volume.scheme();
    let design = OlsDesign::new(scheme)?;
    let b0_idx = scheme.b0_indices();
    let dims = volume.dims();
    let nv = dims.n_voxels();
    let fits: Vec<Option<VoxelFit>> = (0..nv)
        .into_par_iter()
        .map(|v| {
            if !volume.mask()[v] {
                return None;
            }
            let signals = volume.voxel_signals(v);
            let b0 = b0_idx.iter().map(|&i| signals[i]).sum::<f64>() / b0_idx.len() as f64;
            if !(b0 > 0.0) {
                return None;
            }
            let floor = SIGNAL_FLOOR * b0;
            let mut clamped = false;
            let logs: Vec<f64> = signals
                .iter()
                .map(|&s| {
                    if s < floor {
                        clamped = true;
                        floor.ln()
                    } else {
                        s.ln()
                    }
                })
                .collect();
            let x = design.solve(&logs);
            Some(VoxelFit {
                tensor: [x[1], x[2], x[3], x[4], x[5], x[6]],
                s0: x[0].exp(),
                clamped,
                residual: design.rms_residual(&x, &logs),
            })
        })
        .collect();

    let mut tensors = vec![[0.0; 6]; nv];
    let mut s0 = vec![0.0; nv];
    let mut mask = vec![false; nv];
    let mut report = FitReport {
        condition_estimate: design.condition(),
        ..FitReport::default()
    };
    let mut res_sum = 0.0;
    for (v, fit) in fits.into_iter().enumerate() {
        match fit {
            Some(f) => {
                tensors[v] = f.tensor;
                s0[v] = f.s0;
                mask[v] = true;
                report.fitted_voxels += 1;
                report.clamped_voxels += f.clamped as usize;
                res_sum += f.residual;
                report.max_log_residual = report.max_log_residual.max(f.residual);
            }
            None if volume.mask()[v] => report.flagged_voxels += 1,
            None => {}
        }
    }
    if report.fitted_voxels > 0 {
        report.mean_log_residual = res_sum / report.fitted_voxels as f64;
    }
    Ok((TensorField::from_parts_unchecked(dims, tensors, s0, mask), report))
}

/// `(FA, MD, AD)` of one tensor. FA is clamped into `[0, 1]`; MD and AD use the
/// raw eigenvalues.
pub fn tensor_metrics(t: &Sym3) -> (f64, f64, f64) {
    let es = eigen3_sym(t);
    metrics_from_eigenvalues(es.values)
}

pub fn metrics_from_eigenvalues(l: [f64; 3]) -> (f64, f64, f64) {
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let ad = l[0];
    let sq = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    let fa = if sq == 0.0 {
        0.0
    } else {
        // Σ(λi − MD)² written through pairwise differences, exact 0 for equal λ
        let pairs = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[2] - l[0]).powi(2);
        ((0.5 * pairs / sq).sqrt()).clamp(0.0, 1.0)
    };
    (fa, md, ad)
}

/// FA, MD and AD at every masked-in voxel; 0 elsewhere.
pub fn derive_metrics(field: &TensorField) -> MetricMaps {
    let dims = field.dims();
    let values: Vec<(f64, f64, f64)> = (0..dims.n_voxels())
        .into_par_iter()
        .map(|v| {
            if field.mask()[v] {
                tensor_metrics(&field.tensors()[v])
            } else {
                (0.0, 0.0, 0.0)
            }
        })
        .collect();
    let mut maps = MetricMaps::zeros(dims, field.mask().to_vec());
    for (v, (fa, md, ad)) in values.into_iter().enumerate() {
        maps.fa[v] = fa;
        maps.md[v] = md;
        maps.ad[v] = ad;
    }
    maps
}
