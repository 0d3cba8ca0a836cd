//! On-disk formats.
//!
//! A volume is a pair of files: `<stem>.vol.json` (header) and `<stem>.vol.raw`
//! (little-endian payload, x-fastest, channel slowest). Gradient schemes use
//! FSL-style `.bval` / `.bvec` text files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dims, DwiVolume, GradientScheme, Metric, MetricMaps};

pub const AXIS_ORDER: &str = "x-fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    Float32,
    Float64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRecord {
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
}

/// Contents of a `.vol.json` header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub channels: usize,
    pub dtype: Dtype,
    pub axis_order: String,
    /// Runs of masked-in voxels as `[start, length]` in x-fastest order.
    pub mask_runs: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

/// A volume file independent of what the channels mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub scheme: Option<GradientScheme>,
    pub labels: Vec<String>,
}

/// Maps `foo`, `foo.vol.json` or `foo.vol.raw` to the header and payload paths.
pub fn volume_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref();
    let s = p.to_string_lossy();
    let stem = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".vol.raw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.vol.json")), PathBuf::from(format!("{stem}.vol.raw")))
}

fn mask_to_runs(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

fn runs_to_mask(runs: &[[usize; 2]], n: usize, path: &Path) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &[start, len] in runs {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= n)
            .ok_or_else(|| Error::malformed(path, format!("mask run [{start}, {len}] exceeds {n} voxels")))?;
        mask[start..end].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

pub fn write_raw_volume(vol: &RawVolume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let (hdr_path, raw_path) = volume_paths(path);
    let nv = vol.dims.n_voxels();
    if vol.data.len() != nv * vol.channels || vol.mask.len() != nv {
        return Err(Error::InvalidVolume(format!(
            "array lengths ({} data, {} mask) do not match {:?}x{}",
            vol.data.len(),
            vol.mask.len(),
            vol.dims.as_array(),
            vol.channels
        )));
    }
    let header = VolumeHeader {
        dims: vol.dims.as_array(),
        channels: vol.channels,
        dtype,
        axis_order: AXIS_ORDER.to_string(),
        mask_runs: mask_to_runs(&vol.mask),
        scheme: vol.scheme.as_ref().map(|s| SchemeRecord {
            bvals: s.bvals().to_vec(),
            bvecs: s.bvecs().to_vec(),
        }),
        labels: vol.labels.clone(),
    };
    let mut payload = Vec::with_capacity(vol.data.len() * dtype.size());
    match dtype {
        Dtype::Float32 => vol.data.iter().for_each(|&x| payload.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::Float64 => vol.data.iter().for_each(|&x| payload.extend_from_slice(&x.to_le_bytes())),
    }
    write_atomic(&raw_path, &payload)?;
    write_json(&hdr_path, &header)
}

pub fn read_raw_volume(path: impl AsRef<Path>) -> Result<RawVolume> {
    let (hdr_path, raw_path) = volume_paths(path);
    let header: VolumeHeader = read_json(&hdr_path)?;
    if header.axis_order != AXIS_ORDER {
        return Err(Error::malformed(&hdr_path, format!("unsupported axis order `{}`", header.axis_order)));
    }
    let [w, h, s] = header.dims;
    let dims = Dims::new(w, h, s);
    let nv = dims.n_voxels();
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = (nv * header.channels * header.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: raw_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::Float64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    let mask = runs_to_mask(&header.mask_runs, nv, &hdr_path)?;
    let scheme = header
        .scheme
        .map(|s| GradientScheme::new(s.bvals, s.bvecs))
        .transpose()?;
    Ok(RawVolume {
        dims,
        channels: header.channels,
        data,
        mask,
        scheme,
        labels: header.labels,
    })
}

pub fn write_volume(vol: &DwiVolume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let raw = RawVolume {
        dims: vol.dims(),
        channels: vol.n_dirs(),
        data: vol.data().to_vec(),
        mask: vol.mask().to_vec(),
        scheme: Some(vol.scheme().clone()),
        labels: Vec::new(),
    };
    write_raw_volume(&raw, path, dtype)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<DwiVolume> {
    let path = path.as_ref();
    let raw = read_raw_volume(path)?;
    let scheme = raw
        .scheme
        .ok_or_else(|| Error::malformed(path, "volume header carries no gradient scheme"))?;
    if scheme.len() != raw.channels {
        return Err(Error::malformed(
            path,
            format!("scheme has {} entries but volume has {} channels", scheme.len(), raw.channels),
        ));
    }
    DwiVolume::new(raw.dims, raw.data, raw.mask, scheme)
}

fn metric_path(prefix: &Path, metric: Metric) -> PathBuf {
    let s = prefix.to_string_lossy();
    let sep = if s.ends_with('/') || s.is_empty() { "" } else { "_" };
    PathBuf::from(format!("{s}{sep}{}", metric.name().to_lowercase()))
}

/// Writes `<prefix>_fa`, `<prefix>_md` and `<prefix>_ad` volume pairs.
pub fn write_metric_maps(maps: &MetricMaps, prefix: impl AsRef<Path>, dtype: Dtype) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for m in Metric::ALL {
        let stem = metric_path(prefix.as_ref(), m);
        let raw = RawVolume {
            dims: maps.dims,
            channels: 1,
            data: maps.get(m).to_vec(),
            mask: maps.mask.clone(),
            scheme: None,
            labels: vec![m.name().to_string()],
        };
        write_raw_volume(&raw, &stem, dtype)?;
        let (h, r) = volume_paths(&stem);
        written.push(h);
        written.push(r);
    }
    Ok(written)
}

pub fn metric_map_paths(prefix: impl AsRef<Path>) -> Vec<PathBuf> {
    Metric::ALL
        .iter()
        .flat_map(|&m| {
            let (h, r) = volume_paths(metric_path(prefix.as_ref(), m));
            [h, r]
        })
        .collect()
}

pub fn read_metric_maps(prefix: impl AsRef<Path>) -> Result<MetricMaps> {
    let mut maps: Option<MetricMaps> = None;
    for m in Metric::ALL {
        let stem = metric_path(prefix.as_ref(), m);
        let raw = read_raw_volume(&stem)?;
        if raw.channels != 1 {
            return Err(Error::malformed(stem, format!("expected 1 channel, found {}", raw.channels)));
        }
        let maps = maps.get_or_insert_with(|| MetricMaps::zeros(raw.dims, raw.mask.clone()));
        if maps.dims != raw.dims {
            return Err(Error::DimensionMismatch {
                left_name: "FA map",
                left: maps.dims.as_array().to_vec(),
                right_name: "metric map",
                right: raw.dims.as_array().to_vec(),
            });
        }
        maps.get_mut(m).copy_from_slice(&raw.data);
    }
    Ok(maps.expect("three metrics read"))
}

fn fmt_f64(x: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{x:?}")
}

/// Writes FSL-style `.bval` (one row) and `.bvec` (three rows) files.
pub fn write_fsl_scheme(scheme: &GradientScheme, bval_path: &Path, bvec_path: &Path) -> Result<()> {
    let mut bval = scheme.bvals().iter().map(|&b| fmt_f64(b)).collect::<Vec<_>>().join(" ");
    bval.push('\n');
    let mut bvec = String::new();
    for axis in 0..3 {
        let row = scheme.bvecs().iter().map(|g| fmt_f64(g[axis])).collect::<Vec<_>>().join(" ");
        bvec.push_str(&row);
        bvec.push('\n');
    }
    write_atomic(bval_path, bval.as_bytes())?;
    write_atomic(bvec_path, bvec.as_bytes())
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::malformed(path, format!("`{t}`: {e}"))))
                .collect()
        })
        .collect()
}

pub fn read_fsl_scheme(bval_path: &Path, bvec_path: &Path) -> Result<GradientScheme> {
    let bvals: Vec<f64> = parse_rows(bval_path)?.into_iter().flatten().collect();
    let rows = parse_rows(bvec_path)?;
    if rows.len() != 3 {
        return Err(Error::malformed(bvec_path, format!("expected 3 rows, found {}", rows.len())));
    }
    if rows.iter().any(|r| r.len() != bvals.len()) {
        return Err(Error::malformed(bvec_path, format!("rows must each have {} entries", bvals.len())));
    }
    let bvecs = (0..bvals.len()).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect();
    GradientScheme::new(bvals, bvecs)
}
