use crate::error::{Error, Result};
use crate::types::{Dims, DwiVolume, Metric, MetricMaps, Patch};

/// Origins `0, stride, 2·stride, …` along one axis that keep a patch of edge
/// `n` inside `len` voxels.
pub fn grid_positions(len: usize, n: usize, stride: usize) -> Vec<usize> {
    if n > len {
        return Vec::new();
    }
    (0..=len - n).step_by(stride).collect()
}

/// Like [`grid_positions`] but always ends with a tile flush against the far
/// edge, so the tiles cover every voxel.
pub fn covering_positions(len: usize, n: usize, stride: usize) -> Vec<usize> {
    let mut pos = grid_positions(len, n, stride);
    if let Some(&last) = pos.last() {
        if last + n < len {
            pos.push(len - n);
        }
    }
    pos
}

fn patch_center(origin: [usize; 3], n: usize) -> [usize; 3] {
    [origin[0] + n / 2, origin[1] + n / 2, origin[2] + n / 2]
}

/// Input block of a patch: every channel of `volume`, read through the mask
/// (masked-out voxels contribute 0), scaled by `1 / scale`.
pub fn patch_signal(volume: &DwiVolume, origin: [usize; 3], n: usize, scale: f64) -> Vec<f64> {
    let dims = volume.dims();
    let channels = volume.n_dirs();
    let mask = volume.mask();
    let mut out = Vec::with_capacity(n * n * n * channels);
    for dz in 0..n {
        for dy in 0..n {
            for dx in 0..n {
                let v = dims.index(origin[0] + dx, origin[1] + dy, origin[2] + dz);
                for c in 0..channels {
                    out.push(if mask[v] { volume.signal(v, c) / scale } else { 0.0 });
                }
            }
        }
    }
    out
}

/// N³×3 target block; masked-out voxels are 0.
pub fn patch_target(maps: &MetricMaps, origin: [usize; 3], n: usize) -> Vec<f64> {
    let dims = maps.dims;
    let mut out = Vec::with_capacity(n * n * n * 3);
    for dz in 0..n {
        for dy in 0..n {
            for dx in 0..n {
                let v = dims.index(origin[0] + dx, origin[1] + dy, origin[2] + dz);
                for m in Metric::ALL {
                    out.push(if maps.mask[v] { maps.get(m)[v] } else { 0.0 });
                }
            }
        }
    }
    out
}

fn check_shared(volume: &DwiVolume, targets: &MetricMaps) -> Result<()> {
    if volume.dims() != targets.dims {
        return Err(Error::DimensionMismatch {
            left_name: "volume",
            left: volume.dims().as_array().to_vec(),
            right_name: "targets",
            right: targets.dims.as_array().to_vec(),
        });
    }
    if volume.mask() != targets.mask.as_slice() {
        return Err(Error::InvalidArgument("volume and target masks differ".into()));
    }
    Ok(())
}

/// Origins of every patch on the stride grid whose center voxel is masked-in.
pub fn patch_origins(dims: Dims, mask: &[bool], n: usize, stride: usize) -> Vec<[usize; 3]> {
    let xs = grid_positions(dims.w, n, stride);
    let ys = grid_positions(dims.h, n, stride);
    let zs = grid_positions(dims.s, n, stride);
    let mut out = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let c = patch_center([x, y, z], n);
                if mask[dims.index(c[0], c[1], c[2])] {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Every axis-aligned patch on the stride grid whose center is masked-in.
///
/// Signals are raw (unit scale); the trainer applies its own normalization.
pub fn extract_patches(volume: &DwiVolume, targets: &MetricMaps, n: usize, stride: usize) -> Result<Vec<Patch>> {
    if n == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size ({n}) and stride ({stride}) must both be at least 1"
        )));
    }
    check_shared(volume, targets)?;
    Ok(patch_origins(volume.dims(), volume.mask(), n, stride)
        .into_iter()
        .map(|origin| Patch {
            origin,
            size: n,
            channels: volume.n_dirs(),
            signal: patch_signal(volume, origin, n, 1.0),
            target: patch_target(targets, origin, n),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GradientScheme;

    fn volume(dims: Dims, mask: Vec<bool>) -> (DwiVolume, MetricMaps) {
        let scheme = GradientScheme::single_shell(1000.0, &[[1.0, 0.0, 0.0]]).unwrap();
        let nv = dims.n_voxels();
        let data = (0..2 * nv).map(|i| i as f64).collect();
        let vol = DwiVolume::new(dims, data, mask.clone(), scheme).unwrap();
        (vol, MetricMaps::zeros(dims, mask))
    }

    #[test]
    fn single_fitting_position() {
        let (v, m) = volume(Dims::cube(3), vec![true; 27]);
        let p = extract_patches(&v, &m, 3, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].origin, [0, 0, 0]);
        assert_eq!(p[0].signal.len(), 27 * 2);
        assert_eq!(p[0].target.len(), 27 * 3);
    }

    #[test]
    fn full_grid_count() {
        let (v, m) = volume(Dims::cube(5), vec![true; 125]);
        assert_eq!(extract_patches(&v, &m, 3, 1).unwrap().len(), 27);
    }

    #[test]
    fn excluded_center_voxel() {
        let dims = Dims::cube(6);
        let mut mask = vec![true; 216];
        mask[dims.index(3, 3, 3)] = false;
        let (v, m) = volume(dims, mask.clone());
        let got = extract_patches(&v, &m, 3, 1).unwrap().len();
        // brute force over every origin in the 4³ grid
        let mut expected = 0;
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    if mask[dims.index(x + 1, y + 1, z + 1)] {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(expected, 63);
        assert_eq!(got, expected);
    }

    #[test]
    fn mismatched_dims_name_both_shapes() {
        let (v, _) = volume(Dims::cube(3), vec![true; 27]);
        let m = MetricMaps::zeros(Dims::new(3, 3, 4), vec![true; 36]);
        let err = extract_patches(&v, &m, 3, 1).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("[3, 3, 3]") && text.contains("[3, 3, 4]"), "{text}");
    }

    #[test]
    fn signal_is_read_through_mask() {
        let dims = Dims::cube(3);
        let mut mask = vec![true; 27];
        mask[0] = false;
        let (v, m) = volume(dims, mask);
        let p = &extract_patches(&v, &m, 3, 1).unwrap()[0];
        assert_eq!(&p.signal[..2], &[0.0, 0.0]);
        assert_eq!(p.signal[2], 1.0);
        assert_eq!(p.signal[3], 28.0);
    }

    #[test]
    fn covering_positions_reach_far_edge() {
        assert_eq!(covering_positions(8, 3, 3), vec![0, 3, 5]);
        assert_eq!(covering_positions(9, 3, 3), vec![0, 3, 6]);
        assert_eq!(covering_positions(2, 3, 3), Vec::<usize>::new());
    }
}
