//! 16-bit binary PGM slices of scalar volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("axis must be x, y or z, got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

impl Gray16 {
    /// `P5` header with maxval 65535 and big-endian samples.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 2);
        for p in &self.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn max(&self) -> u16 {
        self.pixels.iter().copied().max().unwrap_or(0)
    }
}

/// Values of one slice, rows along the second in-plane axis. For `Z` the
/// image is x by y, for `Y` x by z, for `X` y by z.
pub fn extract_slice(values: &[f64], dims: Dims, axis: Axis, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    if values.len() != dims.n_voxels() {
        return Err(Error::Shape {
            expected: format!("{} values", dims.n_voxels()),
            actual: format!("{} values", values.len()),
        });
    }
    let len = match axis {
        Axis::X => dims.w,
        Axis::Y => dims.h,
        Axis::Z => dims.s,
    };
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let (w, h) = match axis {
        Axis::X => (dims.h, dims.s),
        Axis::Y => (dims.w, dims.s),
        Axis::Z => (dims.w, dims.h),
    };
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let v = match axis {
                Axis::X => dims.index(index, c, r),
                Axis::Y => dims.index(c, index, r),
                Axis::Z => dims.index(c, r, index),
            };
            out.push(values[v]);
        }
    }
    Ok((w, h, out))
}

/// Maps `[0, data_range]` linearly onto `[0, 65535]`, clipping outside.
/// Non-finite values render as 0.
pub fn to_gray(width: usize, height: usize, values: &[f64], data_range: f64) -> Result<Gray16> {
    if !(data_range >= 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be finite and >= 0, got {data_range}")));
    }
    let pixels = values
        .iter()
        .map(|&v| {
            if !v.is_finite() || data_range == 0.0 {
                0
            } else {
                ((v / data_range).clamp(0.0, 1.0) * 65535.0).round() as u16
            }
        })
        .collect();
    Ok(Gray16 { width, height, pixels })
}

/// Largest finite value of `values` within `mask` (0 when there is none).
pub fn default_range(values: &[f64], mask: &[bool]) -> f64 {
    values
        .iter()
        .zip(mask)
        .filter(|(v, &m)| m && v.is_finite())
        .fold(0.0f64, |a, (&v, _)| a.max(v))
}

pub fn render_slice(values: &[f64], dims: Dims, axis: Axis, index: usize, data_range: f64) -> Result<Gray16> {
    let (w, h, s) = extract_slice(values, dims, axis, index)?;
    to_gray(w, h, &s, data_range)
}

/// `|a − b|` on one slice, on the same scale as the slice itself.
pub fn render_residual(a: &[f64], b: &[f64], dims: Dims, axis: Axis, index: usize, data_range: f64) -> Result<Gray16> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} values", a.len()),
            actual: format!("{} values", b.len()),
        });
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    render_slice(&diff, dims, axis, index, data_range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_slice_is_constant() {
        let dims = Dims::new(4, 3, 2);
        let g = render_slice(&[0.4; 24], dims, Axis::Z, 1, 0.8).unwrap();
        assert_eq!((g.width, g.height), (4, 3));
        assert!(g.pixels.iter().all(|&p| p == 32768));
    }

    #[test]
    fn residual_of_identical_volumes_is_black() {
        let dims = Dims::new(3, 3, 3);
        let v: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let g = render_residual(&v, &v, dims, Axis::Y, 2, 26.0).unwrap();
        assert!(g.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn out_of_bounds_slice() {
        let dims = Dims::new(3, 3, 3);
        assert!(matches!(
            render_slice(&[0.0; 27], dims, Axis::X, 3, 1.0),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn slice_orientation() {
        let dims = Dims::new(2, 3, 4);
        let v: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (w, h, s) = extract_slice(&v, dims, Axis::X, 1).unwrap();
        assert_eq!((w, h), (3, 4));
        assert_eq!(s[0], dims.index(1, 0, 0) as f64);
        assert_eq!(s[w], dims.index(1, 0, 1) as f64);
    }

    #[test]
    fn pgm_header_and_samples() {
        let g = Gray16 {
            width: 2,
            height: 1,
            pixels: vec![1, 65535],
        };
        assert_eq!(g.to_pgm(), b"P5\n2 1\n65535\n\x00\x01\xff\xff".to_vec());
    }
}
