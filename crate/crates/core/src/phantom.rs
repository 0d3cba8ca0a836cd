//! Synthetic tensor phantoms, the Stejskal–Tanner signal model and Rician
//! magnitude noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{eigen3_sym, Sym3};
use crate::error::{Error, Result};
use crate::io::RawVolume;
use crate::types::{Dims, DwiVolume, GradientScheme};

/// Eigenvalues (mm²/s) used by the presets.
pub const WHITE_MATTER: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];
pub const GRAY_MATTER: f64 = 0.8e-3;
pub const CSF: f64 = 3.0e-3;

pub const PRESETS: [&str; 3] = ["iso-only", "fiber-x", "mixed"];

/// Per-voxel symmetric diffusion tensors (`[xx, yy, zz, xy, xz, yz]`, mm²/s)
/// with the non-diffusion-weighted signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    dims: Dims,
    tensors: Vec<Sym3>,
    s0: Vec<f64>,
    mask: Vec<bool>,
}

impl TensorField {
    /// Checks positive semi-definiteness and `s0 > 0` on masked-in voxels.
    pub fn new(dims: Dims, tensors: Vec<Sym3>, s0: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let nv = dims.n_voxels();
        if tensors.len() != nv || s0.len() != nv || mask.len() != nv {
            return Err(Error::InvalidVolume(format!(
                "tensor field arrays ({}, {}, {}) do not match {nv} voxels",
                tensors.len(),
                s0.len(),
                mask.len()
            )));
        }
        for v in (0..nv).filter(|&v| mask[v]) {
            let t = &tensors[v];
            if t.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidVolume(format!("non-finite tensor at {:?}", dims.coords(v))));
            }
            let smallest = eigen3_sym(t).values[2];
            if smallest < -1e-12 {
                return Err(Error::InvalidVolume(format!(
                    "tensor at {:?} is not positive semi-definite (eigenvalue {smallest:e})",
                    dims.coords(v)
                )));
            }
            if !(s0[v] > 0.0) {
                return Err(Error::InvalidVolume(format!("s0 = {} at {:?}", s0[v], dims.coords(v))));
            }
        }
        Ok(TensorField { dims, tensors, s0, mask })
    }

    /// For fitted fields, which may be indefinite under noise.
    pub(crate) fn from_parts_unchecked(dims: Dims, tensors: Vec<Sym3>, s0: Vec<f64>, mask: Vec<bool>) -> Self {
        TensorField { dims, tensors, s0, mask }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn tensors(&self) -> &[Sym3] {
        &self.tensors
    }

    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub const LABELS: [&'static str; 7] = ["Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz", "S0"];

    /// Seven-channel volume: the six tensor components then S0.
    pub fn to_raw(&self) -> RawVolume {
        let nv = self.dims.n_voxels();
        let mut data = vec![0.0; nv * 7];
        for v in 0..nv {
            for c in 0..6 {
                data[c * nv + v] = self.tensors[v][c];
            }
            data[6 * nv + v] = self.s0[v];
        }
        RawVolume {
            dims: self.dims,
            channels: 7,
            data,
            mask: self.mask.clone(),
            scheme: None,
            labels: Self::LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_raw(raw: &RawVolume) -> Result<Self> {
        if raw.channels != 7 {
            return Err(Error::InvalidVolume(format!("tensor volume needs 7 channels, found {}", raw.channels)));
        }
        let nv = raw.dims.n_voxels();
        let tensors = (0..nv).map(|v| std::array::from_fn(|c| raw.data[c * nv + v])).collect();
        let s0 = raw.data[6 * nv..].to_vec();
        Ok(TensorField::from_parts_unchecked(raw.dims, tensors, s0, raw.mask.clone()))
    }
}

/// Cylindrically symmetric tensor `λ⊥·I + (λ∥ − λ⊥)·e eᵀ` for unit `e`.
pub fn axial_tensor(e: [f64; 3], parallel: f64, perp: f64) -> Sym3 {
    let d = parallel - perp;
    [
        perp + d * e[0] * e[0],
        perp + d * e[1] * e[1],
        perp + d * e[2] * e[2],
        d * e[0] * e[1],
        d * e[0] * e[2],
        d * e[1] * e[2],
    ]
}

pub fn isotropic_tensor(d: f64) -> Sym3 {
    [d, d, d, 0.0, 0.0, 0.0]
}

/// Region labels of the synthetic layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Background,
    Isotropic,
    Fiber,
}

struct Geometry {
    dims: Dims,
    center: [f64; 3],
    radius: [f64; 3],
}

impl Geometry {
    fn new(dims: Dims) -> Self {
        let c = |n: usize| (n as f64 - 1.0) / 2.0;
        let r = |n: usize| 0.95 * n as f64 / 2.0;
        Geometry {
            dims,
            center: [c(dims.w), c(dims.h), c(dims.s)],
            radius: [r(dims.w), r(dims.h), r(dims.s)],
        }
    }

    /// Normalized coordinates; the brain ellipsoid is the unit ball.
    fn unit(&self, v: usize) -> [f64; 3] {
        let p = self.dims.coords(v);
        std::array::from_fn(|i| (p[i] as f64 - self.center[i]) / self.radius[i])
    }

    fn inside(&self, v: usize) -> bool {
        let u = self.unit(v);
        u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0
    }
}

/// Smooth random field `1 + amp·Σ sin(k·u + φ)` used for mild tissue
/// heterogeneity.
struct Modulation {
    waves: Vec<([f64; 3], f64)>,
    amp: f64,
}

impl Modulation {
    fn new(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
                (k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Modulation { waves, amp }
    }

    fn at(&self, u: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phi)| (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + phi).sin())
            .sum();
        1.0 + self.amp * s / self.waves.len() as f64
    }
}

/// Builds a synthetic tensor field.
///
/// * `iso-only`: isotropic tissue everywhere inside the brain ellipsoid, with
///   a CSF-like core.
/// * `fiber-x`: isotropic tissue with a straight bundle along x through the
///   center.
/// * `mixed`: CSF core, a ring-shaped bundle whose orientation follows the
///   ring tangent, a z-oriented bundle in the outer shell of the x > 0 half
///   (present on every axial slice) and gray-matter-like tissue.
///
/// The region map is returned alongside the field.
pub fn make_phantom_with_regions(dims: Dims, preset: &str, seed: u64) -> Result<(TensorField, Vec<Region>)> {
    if !PRESETS.contains(&preset) {
        return Err(Error::UnknownPreset {
            name: preset.to_string(),
            available: PRESETS.join(", "),
        });
    }
    if dims.w < 4 || dims.h < 4 || dims.s < 4 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must each be at least 4, got {:?}",
            dims.as_array()
        )));
    }
    let geo = Geometry::new(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0_mod = Modulation::new(&mut rng, 0.15);
    let gm_mod = Modulation::new(&mut rng, 0.2);
    let wm_mod = Modulation::new(&mut rng, 0.15);
    let ring_radius = rng.random_range(0.42..0.5);

    let nv = dims.n_voxels();
    let mut tensors = vec![[0.0; 6]; nv];
    let mut s0 = vec![0.0; nv];
    let mut mask = vec![false; nv];
    let mut regions = vec![Region::Background; nv];
    for v in 0..nv {
        if !geo.inside(v) {
            continue;
        }
        let u = geo.unit(v);
        mask[v] = true;
        s0[v] = if preset == "mixed" { s0_mod.at(u) } else { 1.0 };
        let core = (u[0] / 0.3).powi(2) + (u[1] / 0.2).powi(2) + (u[2] / 0.35).powi(2) <= 1.0;
        let (tensor, region) = match preset {
            "iso-only" => {
                let d = if core { CSF } else { GRAY_MATTER };
                (isotropic_tensor(d), Region::Isotropic)
            }
            "fiber-x" => {
                if u[1].abs() <= 0.3 && u[2].abs() <= 0.3 {
                    (axial_tensor([1.0, 0.0, 0.0], WHITE_MATTER[0], WHITE_MATTER[1]), Region::Fiber)
                } else {
                    (isotropic_tensor(GRAY_MATTER), Region::Isotropic)
                }
            }
            _ => {
                let rho = (u[0] * u[0] + u[1] * u[1]).sqrt();
                if core {
                    (isotropic_tensor(CSF), Region::Isotropic)
                } else if (rho - ring_radius).abs() <= 0.13 && u[2].abs() <= 0.4 {
                    let e = [-u[1] / rho, u[0] / rho, 0.0];
                    let m = wm_mod.at(u);
                    (axial_tensor(e, WHITE_MATTER[0] * m, WHITE_MATTER[1]), Region::Fiber)
                } else if rho >= 0.72 * (1.0 - u[2] * u[2]).max(0.0).sqrt() && u[0] > 0.0 {
                    let m = wm_mod.at(u);
                    (axial_tensor([0.0, 0.0, 1.0], 1.5e-3 * m, 0.35e-3), Region::Fiber)
                } else {
                    (isotropic_tensor(GRAY_MATTER * gm_mod.at(u)), Region::Isotropic)
                }
            }
        };
        tensors[v] = tensor;
        regions[v] = region;
    }
    Ok((TensorField::new(dims, tensors, s0, mask)?, regions))
}

pub fn make_phantom(dims: Dims, preset: &str, seed: u64) -> Result<TensorField> {
    make_phantom_with_regions(dims, preset, seed).map(|(f, _)| f)
}

/// Noiseless signal `S0 · exp(−b gᵀ D g)` per voxel and scheme entry.
/// Masked-out voxels hold 0.
pub fn simulate_dwi(field: &TensorField, scheme: &GradientScheme) -> Result<DwiVolume> {
    let dims = field.dims();
    let nv = dims.n_voxels();
    let nd = scheme.len();
    let per_voxel: Vec<Vec<f64>> = (0..nv)
        .into_par_iter()
        .map(|v| {
            if !field.mask()[v] {
                return vec![0.0; nd];
            }
            let t = &field.tensors()[v];
            scheme
                .bvals()
                .iter()
                .zip(scheme.bvecs())
                .map(|(&b, g)| {
                    if b == 0.0 {
                        return field.s0()[v];
                    }
                    let q = t[0] * g[0] * g[0]
                        + t[1] * g[1] * g[1]
                        + t[2] * g[2] * g[2]
                        + 2.0 * (t[3] * g[0] * g[1] + t[4] * g[0] * g[2] + t[5] * g[1] * g[2]);
                    field.s0()[v] * (-b * q).exp()
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; nv * nd];
    for (v, sig) in per_voxel.into_iter().enumerate() {
        for (d, s) in sig.into_iter().enumerate() {
            data[d * nv + v] = s;
        }
    }
    DwiVolume::new(dims, data, field.mask().to_vec(), scheme.clone())
}

/// Rician noise level relative to the mean masked-in b0 signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Per-voxel random stream: ChaCha8 keyed by `seed`, stream id = voxel index.
/// Draws are consumed in direction order, two standard normals per entry.
pub fn voxel_rng(seed: u64, voxel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(voxel as u64);
    rng
}

/// Magnitude of a complex signal corrupted by independent Gaussian noise in
/// both channels.
#[inline]
pub fn rician_sample<R: Rng>(signal: f64, sigma_abs: f64, rng: &mut R) -> f64 {
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    let re = signal + sigma_abs * n1;
    let im = sigma_abs * n2;
    re.hypot(im)
}

/// Applies Rician noise with `σ_abs = spec.sigma × mean masked-in b0` to every
/// finite value (masked-out background included).
pub fn add_rician_noise(volume: &DwiVolume, spec: NoiseSpec) -> Result<DwiVolume> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", spec.sigma)));
    }
    if spec.sigma == 0.0 {
        return Ok(volume.clone());
    }
    let sigma_abs = spec.sigma * volume.mean_b0()?;
    let dims = volume.dims();
    let nv = dims.n_voxels();
    let nd = volume.n_dirs();
    let per_voxel: Vec<Vec<f64>> = (0..nv)
        .into_par_iter()
        .map(|v| {
            let mut rng = voxel_rng(spec.seed, v);
            (0..nd)
                .map(|d| {
                    let s = volume.signal(v, d);
                    if s.is_finite() {
                        rician_sample(s, sigma_abs, &mut rng)
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; nv * nd];
    for (v, sig) in per_voxel.into_iter().enumerate() {
        for (d, s) in sig.into_iter().enumerate() {
            data[d * nv + v] = s;
        }
    }
    DwiVolume::new(dims, data, volume.mask().to_vec(), volume.scheme().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dti::derive_metrics;

    fn axes_scheme() -> GradientScheme {
        GradientScheme::single_shell(1000.0, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
    }

    #[test]
    fn unknown_preset_lists_available() {
        let err = make_phantom(Dims::cube(8), "swirl", 0).unwrap_err();
        let text = err.to_string();
        for p in PRESETS {
            assert!(text.contains(p), "{text}");
        }
    }

    #[test]
    fn small_dims_rejected() {
        assert!(make_phantom(Dims::new(3, 8, 8), "mixed", 0).is_err());
    }

    #[test]
    fn iso_only_has_zero_fa() {
        let f = make_phantom(Dims::cube(10), "iso-only", 1).unwrap();
        let m = derive_metrics(&f);
        for v in 0..m.fa.len() {
            if m.mask[v] {
                assert_eq!(m.fa[v], 0.0);
            }
        }
        assert!(m.mask.iter().any(|&x| x) && m.mask.iter().any(|&x| !x));
    }

    #[test]
    fn fiber_x_core_points_along_x() {
        let dims = Dims::cube(12);
        let (f, regions) = make_phantom_with_regions(dims, "fiber-x", 3).unwrap();
        let mut n = 0;
        for v in 0..dims.n_voxels() {
            if regions[v] == Region::Fiber {
                let e = eigen3_sym(&f.tensors()[v]).vectors[0];
                assert!((e[0].abs() - 1.0).abs() < 1e-9 && e[1].abs() < 1e-9 && e[2].abs() < 1e-9);
                n += 1;
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn mixed_is_deterministic_and_has_three_regions() {
        let dims = Dims::cube(16);
        let (a, ra) = make_phantom_with_regions(dims, "mixed", 7).unwrap();
        let (b, _) = make_phantom_with_regions(dims, "mixed", 7).unwrap();
        assert_eq!(a, b);
        for r in [Region::Background, Region::Isotropic, Region::Fiber] {
            assert!(ra.contains(&r), "{r:?} missing");
        }
        let (c, _) = make_phantom_with_regions(dims, "mixed", 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn isotropic_signal() {
        let d = 0.9e-3;
        let f = TensorField::new(Dims::cube(1), vec![isotropic_tensor(d)], vec![2.0], vec![true]).unwrap();
        let vol = simulate_dwi(&f, &axes_scheme()).unwrap();
        assert_eq!(vol.signal(0, 0), 2.0);
        for k in 1..4 {
            assert!((vol.signal(0, k) - 2.0 * (-1000.0 * d).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn white_matter_signal_along_fiber() {
        let t = [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0];
        let f = TensorField::new(Dims::cube(1), vec![t], vec![1.0], vec![true]).unwrap();
        let vol = simulate_dwi(&f, &axes_scheme()).unwrap();
        // exp(-1.7) evaluated independently
        assert!((vol.signal(0, 1) - 0.182_683_524_052_734_66).abs() < 1e-15);
    }

    #[test]
    fn indefinite_tensor_rejected() {
        let t = [1e-3, -1e-3, 1e-3, 0.0, 0.0, 0.0];
        assert!(TensorField::new(Dims::cube(1), vec![t], vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let f = make_phantom(Dims::cube(6), "mixed", 2).unwrap();
        let vol = simulate_dwi(&f, &axes_scheme()).unwrap();
        let out = add_rician_noise(&vol, NoiseSpec { sigma: 0.0, seed: 9 }).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn rayleigh_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rician_sample(0.0, 1.0, &mut rng)).sum::<f64>() / n as f64;
        let expected = (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn noise_is_deterministic_and_nonnegative() {
        let f = make_phantom(Dims::cube(8), "mixed", 2).unwrap();
        let vol = simulate_dwi(&f, &axes_scheme()).unwrap();
        let spec = NoiseSpec { sigma: 0.05, seed: 17 };
        let a = add_rician_noise(&vol, spec).unwrap();
        let b = add_rician_noise(&vol, spec).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&x| x >= 0.0));
        let c = add_rician_noise(&vol, NoiseSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tensor_field_raw_round_trip() {
        let f = make_phantom(Dims::cube(6), "fiber-x", 1).unwrap();
        let back = TensorField::from_raw(&f.to_raw()).unwrap();
        assert_eq!(back, f);
    }
}
