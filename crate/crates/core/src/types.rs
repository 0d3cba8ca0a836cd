//! Shared data model: gradient schemes, diffusion volumes, metric maps and
//! patches.
//!
//! Every volume-shaped array is stored x-fastest, then y, then z. Multi-channel
//! arrays keep one full 3D volume per channel (channel slowest), which is the
//! same layout used by the on-disk payload.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the Euclidean norm of diffusion-weighted gradient directions.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub s: usize,
}

impl Dims {
    pub fn new(w: usize, h: usize, s: usize) -> Self {
        Dims { w, h, s }
    }

    pub fn cube(n: usize) -> Self {
        Dims { w: n, h: n, s: n }
    }

    pub fn n_voxels(&self) -> usize {
        self.w * self.h * self.s
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, v: usize) -> [usize; 3] {
        let x = v % self.w;
        let y = (v / self.w) % self.h;
        let z = v / (self.w * self.h);
        [x, y, z]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.s]
    }
}

/// The three scalar maps predicted by the network, in their fixed channel
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Fa,
    Md,
    Ad,
}

impl Metric {
    /// Canonical channel order: 0 = FA, 1 = MD, 2 = AD.
    pub const ALL: [Metric; 3] = [Metric::Fa, Metric::Md, Metric::Ad];

    pub fn channel(self) -> usize {
        match self {
            Metric::Fa => 0,
            Metric::Md => 1,
            Metric::Ad => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fa => "FA",
            Metric::Md => "MD",
            Metric::Ad => "AD",
        }
    }
}

/// b-values (s/mm²) and unit gradient directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientScheme {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl GradientScheme {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::InvalidScheme(format!(
                "{} b-values but {} b-vectors",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, (&b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::InvalidScheme(format!("b-value {b} at index {i} is negative or not finite")));
            }
            if b > 0.0 {
                let norm = norm3(g);
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::InvalidScheme(format!(
                        "gradient {i} has norm {norm:.9}, expected unit length"
                    )));
                }
            }
        }
        Ok(GradientScheme { bvals, bvecs })
    }

    /// One b0 entry followed by `dirs` at a single b-value.
    pub fn single_shell(bval: f64, dirs: &[[f64; 3]]) -> Result<Self> {
        let mut bvals = vec![0.0];
        let mut bvecs = vec![[0.0; 3]];
        for g in dirs {
            bvals.push(bval);
            bvecs.push(*g);
        }
        GradientScheme::new(bvals, bvecs)
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn is_b0(&self, i: usize) -> bool {
        self.bvals[i] == 0.0
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_b0(i)).collect()
    }

    pub fn dw_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_b0(i)).collect()
    }

    /// Keeps the listed entries, in the given order.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        let mut bvals = Vec::with_capacity(indices.len());
        let mut bvecs = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            bvals.push(self.bvals[i]);
            bvecs.push(self.bvecs[i]);
        }
        GradientScheme::new(bvals, bvecs)
    }

    pub(crate) fn require_b0(&self) -> Result<()> {
        if self.b0_indices().is_empty() {
            return Err(Error::InvalidScheme("no b=0 entry available".into()));
        }
        Ok(())
    }
}

pub(crate) fn norm3(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

/// 4D diffusion-weighted signal with a brain mask.
///
/// `data[d * n_voxels + v]` holds direction `d` at voxel `v`. Masked-out
/// voxels may hold any value, including NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    dims: Dims,
    data: Vec<f64>,
    mask: Vec<bool>,
    scheme: GradientScheme,
}

impl DwiVolume {
    pub fn new(dims: Dims, data: Vec<f64>, mask: Vec<bool>, scheme: GradientScheme) -> Result<Self> {
        let nv = dims.n_voxels();
        if mask.len() != nv {
            return Err(Error::DimensionMismatch {
                left_name: "mask",
                left: vec![mask.len()],
                right_name: "volume",
                right: dims.as_array().to_vec(),
            });
        }
        if data.len() != nv * scheme.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not equal {}x{}x{}x{} = {}",
                data.len(),
                dims.w,
                dims.h,
                dims.s,
                scheme.len(),
                nv * scheme.len()
            )));
        }
        for d in 0..scheme.len() {
            let chan = &data[d * nv..(d + 1) * nv];
            for (v, (&s, &m)) in chan.iter().zip(&mask).enumerate() {
                if m && !(s.is_finite() && s >= 0.0) {
                    return Err(Error::InvalidVolume(format!(
                        "masked-in voxel {:?} direction {d} holds {s}",
                        dims.coords(v)
                    )));
                }
            }
        }
        Ok(DwiVolume { dims, data, mask, scheme })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scheme(&self) -> &GradientScheme {
        &self.scheme
    }

    pub fn n_dirs(&self) -> usize {
        self.scheme.len()
    }

    pub fn channel(&self, d: usize) -> &[f64] {
        let nv = self.dims.n_voxels();
        &self.data[d * nv..(d + 1) * nv]
    }

    #[inline]
    pub fn signal(&self, v: usize, d: usize) -> f64 {
        self.data[d * self.dims.n_voxels() + v]
    }

    pub fn voxel_signals(&self, v: usize) -> Vec<f64> {
        (0..self.n_dirs()).map(|d| self.signal(v, d)).collect()
    }

    /// Mean b0 signal over masked-in voxels and all b0 entries.
    pub fn mean_b0(&self) -> Result<f64> {
        self.scheme.require_b0()?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for d in self.scheme.b0_indices() {
            for (v, &m) in self.mask.iter().enumerate() {
                if m {
                    sum += self.signal(v, d);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::Empty("mask"));
        }
        Ok(sum / n as f64)
    }
}

/// Per-voxel FA (dimensionless), MD and AD (mm²/s).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMaps {
    pub dims: Dims,
    pub fa: Vec<f64>,
    pub md: Vec<f64>,
    pub ad: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MetricMaps {
    pub fn zeros(dims: Dims, mask: Vec<bool>) -> Self {
        let nv = dims.n_voxels();
        MetricMaps {
            dims,
            fa: vec![0.0; nv],
            md: vec![0.0; nv],
            ad: vec![0.0; nv],
            mask,
        }
    }

    pub fn get(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Fa => &self.fa,
            Metric::Md => &self.md,
            Metric::Ad => &self.ad,
        }
    }

    pub fn get_mut(&mut self, metric: Metric) -> &mut [f64] {
        match metric {
            Metric::Fa => &mut self.fa,
            Metric::Md => &mut self.md,
            Metric::Ad => &mut self.ad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.dims.n_voxels();
        for m in Metric::ALL {
            if self.get(m).len() != nv {
                return Err(Error::InvalidVolume(format!("{} map has wrong length", m.name())));
            }
        }
        if self.mask.len() != nv {
            return Err(Error::InvalidVolume("mask has wrong length".into()));
        }
        for v in (0..nv).filter(|&v| self.mask[v]) {
            let fa = self.fa[v];
            if !(fa.is_finite() && (0.0..=1.0 + 1e-9).contains(&fa)) {
                return Err(Error::InvalidVolume(format!("FA {fa} out of range at {:?}", self.dims.coords(v))));
            }
            if !self.md[v].is_finite() || !self.ad[v].is_finite() {
                return Err(Error::InvalidVolume(format!("non-finite MD/AD at {:?}", self.dims.coords(v))));
            }
        }
        Ok(())
    }
}

/// An N×N×N block of input signal and metric targets.
///
/// `signal[(p * channels) + c]` and `target[(p * 3) + metric]`, where `p` is the
/// x-fastest voxel index inside the patch. The target block is therefore the
/// row-major N³×3 parameter matrix of the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: usize,
    pub channels: usize,
    pub signal: Vec<f64>,
    pub target: Vec<f64>,
}

impl Patch {
    pub fn n_voxels(&self) -> usize {
        self.size * self.size * self.size
    }
}
