//! MSE, SSIM and PSNR between metric maps, restricted to a brain mask.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5, K1 = 0.01, K2 = 0.03) over
//! valid window positions of each axial slice; a volume's SSIM is the mean
//! over slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dims, Metric, MetricMaps};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

fn check_pair(pred: &MetricMaps, gt: &MetricMaps, mask: &[bool]) -> Result<usize> {
    if pred.dims != gt.dims {
        return Err(Error::DimensionMismatch {
            left_name: "prediction",
            left: pred.dims.as_array().to_vec(),
            right_name: "ground truth",
            right: gt.dims.as_array().to_vec(),
        });
    }
    if mask.len() != gt.dims.n_voxels() {
        return Err(Error::DimensionMismatch {
            left_name: "mask",
            left: vec![mask.len()],
            right_name: "maps",
            right: gt.dims.as_array().to_vec(),
        });
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Empty("evaluation mask"));
    }
    Ok(n)
}

fn masked_mse(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((x, y), &m) in a.iter().zip(b).zip(mask) {
        if m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    sum / n as f64
}

/// Mean squared difference over masked-in voxels, per metric (FA, MD, AD).
pub fn mse(pred: &MetricMaps, gt: &MetricMaps, mask: &[bool]) -> Result<[f64; 3]> {
    check_pair(pred, gt, mask)?;
    Ok(Metric::ALL.map(|m| masked_mse(pred.get(m), gt.get(m), mask)))
}

/// `10·log10(range² / mse)`; a perfect match gives `+∞`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

pub fn psnr(pred: &[f64], gt: &[f64], data_range: f64, mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape {
            expected: format!("{} values", gt.len()),
            actual: format!("{} predictions, {} mask entries", pred.len(), mask.len()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("evaluation mask"));
    }
    Ok(psnr_from_mse(masked_mse(pred, gt, mask), data_range))
}

/// Normalized 11×11 Gaussian weights, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|x| x / s).collect();
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    for a in &g1 {
        for b in &g1 {
            w.push(a * b);
        }
    }
    w
}

/// SSIM at every valid window position of a `width × height` image
/// (x-fastest). Returns the map, `(width − 10) × (height − 10)` entries.
pub fn ssim_map(pred: &[f64], gt: &[f64], width: usize, height: usize, data_range: f64) -> Result<Vec<f64>> {
    if pred.len() != width * height || gt.len() != width * height {
        return Err(Error::Shape {
            expected: format!("{width} x {height} slices"),
            actual: format!("{} and {} values", pred.len(), gt.len()),
        });
    }
    if width < WINDOW || height < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "slice {width} x {height} is smaller than the {WINDOW} x {WINDOW} window"
        )));
    }
    let w = gaussian_window();
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let (ow, oh) = (width - WINDOW + 1, height - WINDOW + 1);
    let mut out = Vec::with_capacity(ow * oh);
    for y0 in 0..oh {
        for x0 in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let wt = w[dy * WINDOW + dx];
                    let i = (y0 + dy) * width + x0 + dx;
                    let (a, b) = (pred[i], gt[i]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            out.push(num / den);
        }
    }
    Ok(out)
}

/// Mean SSIM over all valid window positions of one 2D slice.
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize, data_range: f64) -> Result<f64> {
    let map = ssim_map(pred, gt, width, height, data_range)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Slice-averaged SSIM of one metric volume. Masked-out voxels are zeroed in
/// both inputs and only windows centered on masked-in voxels are averaged;
/// slices without such a window are skipped. Returns per-slice values.
pub fn masked_volume_ssim(pred: &[f64], gt: &[f64], dims: Dims, mask: &[bool], data_range: f64) -> Result<Vec<f64>> {
    let plane = dims.w * dims.h;
    let half = WINDOW / 2;
    let (ow, oh) = (dims.w.saturating_sub(WINDOW - 1), dims.h.saturating_sub(WINDOW - 1));
    let mut per_slice = Vec::new();
    for z in 0..dims.s {
        let range = z * plane..(z + 1) * plane;
        let m = &mask[range.clone()];
        if !m.iter().any(|&x| x) {
            continue;
        }
        let zero_out = |src: &[f64]| -> Vec<f64> { src[range.clone()].iter().zip(m).map(|(&v, &k)| if k { v } else { 0.0 }).collect() };
        let (a, b) = (zero_out(pred), zero_out(gt));
        let map = ssim_map(&a, &b, dims.w, dims.h, data_range)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for y0 in 0..oh {
            for x0 in 0..ow {
                if m[(y0 + half) * dims.w + x0 + half] {
                    sum += map[y0 * ow + x0];
                    n += 1;
                }
            }
        }
        if n > 0 {
            per_slice.push(sum / n as f64);
        }
    }
    Ok(per_slice)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub metric: String,
    pub mse: f64,
    pub ssim: f64,
    /// `None` when the prediction is exact (infinite PSNR).
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub data_range: f64,
    pub ssim_slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledScores {
    pub mse: f64,
    pub ssim: f64,
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    /// Standard deviations over axial slices of the three-metric mean.
    pub mse_std: f64,
    pub ssim_std: f64,
    pub psnr_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub voxels: usize,
    pub metrics: Vec<MetricScores>,
    pub all: PooledScores,
}

impl EvalReport {
    pub fn scores(&self, m: Metric) -> &MetricScores {
        &self.metrics[m.channel()]
    }

    /// PSNR as a float, `+∞` for exact matches.
    pub fn psnr_value(s: &MetricScores) -> f64 {
        s.psnr.unwrap_or(f64::INFINITY)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Full report on already-normalized maps. The data range of each metric is
/// the spread of its ground truth within the mask.
pub fn evaluate(pred: &MetricMaps, gt: &MetricMaps, mask: &[bool]) -> Result<EvalReport> {
    let voxels = check_pair(pred, gt, mask)?;
    let dims = gt.dims;
    let plane = dims.w * dims.h;
    let mut metrics = Vec::with_capacity(3);
    // per-slice values per metric, for the pooled spread
    let mut slice_mse: Vec<Vec<f64>> = Vec::new();
    let mut slice_psnr: Vec<Vec<f64>> = Vec::new();
    let mut slice_ssim: Vec<Vec<f64>> = Vec::new();
    for m in Metric::ALL {
        let (p, g) = (pred.get(m), gt.get(m));
        let (lo, hi) = g
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let mse = masked_mse(p, g, mask);
        let psnr = psnr_from_mse(mse, range);
        let slices = masked_volume_ssim(p, g, dims, mask, range)?;
        let ssim = slices.iter().sum::<f64>() / slices.len() as f64;
        let mut sm = Vec::new();
        let mut sp = Vec::new();
        for z in 0..dims.s {
            let r = z * plane..(z + 1) * plane;
            if mask[r.clone()].iter().any(|&k| k) {
                let e = masked_mse(&p[r.clone()], &g[r.clone()], &mask[r]);
                sm.push(e);
                sp.push(psnr_from_mse(e, range));
            }
        }
        slice_mse.push(sm);
        slice_psnr.push(sp);
        slice_ssim.push(slices.clone());
        metrics.push(MetricScores {
            metric: m.name().to_string(),
            mse,
            ssim,
            psnr: finite_or_none(psnr),
            psnr_infinite: psnr.is_infinite(),
            data_range: range,
            ssim_slices: slices.len(),
        });
    }
    let pooled = |per_metric: &[Vec<f64>]| -> Vec<f64> {
        let n = per_metric.iter().map(|v| v.len()).min().unwrap_or(0);
        (0..n).map(|i| per_metric.iter().map(|v| v[i]).sum::<f64>() / 3.0).collect()
    };
    let psnr_all = metrics.iter().map(EvalReport::psnr_value).sum::<f64>() / 3.0;
    let all = PooledScores {
        mse: metrics.iter().map(|s| s.mse).sum::<f64>() / 3.0,
        ssim: metrics.iter().map(|s| s.ssim).sum::<f64>() / 3.0,
        psnr: finite_or_none(psnr_all),
        psnr_infinite: psnr_all.is_infinite(),
        mse_std: mean_std(&pooled(&slice_mse)).1,
        ssim_std: mean_std(&pooled(&slice_ssim)).1,
        psnr_std: finite_or_none(mean_std(&pooled(&slice_psnr)).1),
    };
    Ok(EvalReport { voxels, metrics, all })
}

fn fmt_psnr(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.3}")).unwrap_or_else(|| "inf".to_string())
}

/// Markdown table with MSE (×10⁻³), SSIM and PSNR per metric plus "All".
pub fn markdown_table(rows: &[(String, &EvalReport)]) -> String {
    let mut s = String::new();
    s.push_str("| Method | MSE FA (x1e-3) | MSE MD | MSE AD | MSE All | SSIM FA | SSIM MD | SSIM AD | SSIM All | PSNR FA | PSNR MD | PSNR AD | PSNR All |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for (name, r) in rows {
        s.push_str(&format!("| {name} "));
        for m in &r.metrics {
            s.push_str(&format!("| {:.3} ", m.mse * 1e3));
        }
        s.push_str(&format!("| {:.3}±{:.3} ", r.all.mse * 1e3, r.all.mse_std * 1e3));
        for m in &r.metrics {
            s.push_str(&format!("| {:.3} ", m.ssim));
        }
        s.push_str(&format!("| {:.3}±{:.3} ", r.all.ssim, r.all.ssim_std));
        for m in &r.metrics {
            s.push_str(&format!("| {} ", fmt_psnr(m.psnr)));
        }
        let std = r.all.psnr_std.map(|v| format!("±{v:.3}")).unwrap_or_default();
        s.push_str(&format!("| {}{std} |\n", fmt_psnr(r.all.psnr)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_maps(dims: Dims, seed: u64) -> MetricMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MetricMaps::zeros(dims, vec![true; dims.n_voxels()]);
        for metric in Metric::ALL {
            m.get_mut(metric).iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
        }
        m
    }

    #[test]
    fn mse_zero_and_offset() {
        let dims = Dims::new(4, 4, 2);
        let gt = random_maps(dims, 1);
        let mask = vec![true; dims.n_voxels()];
        assert_eq!(mse(&gt, &gt, &mask).unwrap(), [0.0; 3]);
        let mut shifted = gt.clone();
        for m in Metric::ALL {
            shifted.get_mut(m).iter_mut().for_each(|x| *x += 0.01);
        }
        for e in mse(&shifted, &gt, &mask).unwrap() {
            assert!((e - 1e-4).abs() < 1e-15, "{e}");
        }
    }

    #[test]
    fn mse_matches_two_pass_loop() {
        let dims = Dims::new(5, 3, 2);
        let (a, b) = (random_maps(dims, 2), random_maps(dims, 3));
        let mut mask = vec![true; dims.n_voxels()];
        mask[4] = false;
        mask[17] = false;
        let got = mse(&a, &b, &mask).unwrap();
        for m in Metric::ALL {
            let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let diffs: Vec<f64> = idx.iter().map(|&i| a.get(m)[i] - b.get(m)[i]).collect();
            let oracle = diffs.iter().map(|d| d * d).sum::<f64>() / idx.len() as f64;
            assert!((got[m.channel()] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let dims = Dims::new(2, 2, 1);
        let a = random_maps(dims, 1);
        assert!(matches!(mse(&a, &a, &[false; 4]), Err(Error::Empty(_))));
        assert!(psnr(&a.fa, &a.fa, 1.0, &[false; 4]).is_err());
    }

    #[test]
    fn psnr_values() {
        let mask = [true; 4];
        assert_eq!(psnr(&[1.0; 4], &[1.0; 4], 1.0, &mask).unwrap(), f64::INFINITY);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert_eq!(psnr_from_mse(1e-3, 1.0), 30.0);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..20 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 0.8 + rng.random_range(0.0..0.2)).collect();
        assert!((ssim(&x, &x, 20, 16, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&x, &y, 20, 16, 1.0).unwrap();
        let ba = ssim(&y, &x, 20, 16, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let anti: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&x, &anti, 20, 16, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (a, b) = (vec![0.3; 121], vec![0.5; 121]);
        let c1 = (K1 * 1.0f64).powi(2);
        let closed = (2.0 * 0.3 * 0.5 + c1) / (0.3f64 * 0.3 + 0.5 * 0.5 + c1);
        let got = ssim(&a, &b, 11, 11, 1.0).unwrap();
        assert!((got - closed).abs() < 1e-12);
        assert!((got - 0.882_387_5).abs() < 1e-6);
    }

    #[test]
    fn ssim_window_too_large() {
        assert!(ssim(&[0.0; 100], &[0.0; 100], 10, 10, 1.0).is_err());
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let dims = Dims::new(12, 12, 3);
        let gt = random_maps(dims, 4);
        let r = evaluate(&gt, &gt, &gt.mask).unwrap();
        for s in &r.metrics {
            assert_eq!(s.mse, 0.0);
            assert!((s.ssim - 1.0).abs() < 1e-12);
            assert!(s.psnr.is_none() && s.psnr_infinite);
        }
        assert!(r.all.psnr_infinite);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":null"));
    }

    #[test]
    fn pooled_is_mean_of_metrics() {
        let dims = Dims::new(12, 12, 2);
        let (a, b) = (random_maps(dims, 5), random_maps(dims, 6));
        let r = evaluate(&a, &b, &b.mask).unwrap();
        let mean = |f: &dyn Fn(&MetricScores) -> f64| r.metrics.iter().map(f).sum::<f64>() / 3.0;
        assert!((r.all.mse - mean(&|s| s.mse)).abs() < 1e-12);
        assert!((r.all.ssim - mean(&|s| s.ssim)).abs() < 1e-12);
        assert!((r.all.psnr.unwrap() - mean(&|s| s.psnr.unwrap())).abs() < 1e-12);
    }

    #[test]
    fn masked_out_voxels_do_not_matter() {
        let dims = Dims::new(14, 13, 2);
        let gt = random_maps(dims, 8);
        let pred = random_maps(dims, 9);
        let mut mask = vec![true; dims.n_voxels()];
        for v in [0, 5, 40, 200, 300] {
            mask[v] = false;
        }
        let base = evaluate(&pred, &gt, &mask).unwrap();
        let mut p2 = pred.clone();
        let mut g2 = gt.clone();
        for v in [0, 5, 40, 200, 300] {
            p2.fa[v] = 1e6;
            g2.md[v] = -3.0;
        }
        assert_eq!(evaluate(&p2, &g2, &mask).unwrap(), base);
    }

    #[test]
    fn table_has_one_row_per_report() {
        let dims = Dims::new(12, 12, 1);
        let gt = random_maps(dims, 1);
        let r = evaluate(&gt, &gt, &gt.mask).unwrap();
        let t = markdown_table(&[("Identity".into(), &r)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("| 1.000±"));
    }
}
