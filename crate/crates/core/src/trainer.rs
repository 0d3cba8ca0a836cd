//! Dataset preparation, the training loop for the three ablation modes,
//! checkpoints and tiled inference.
//!
//! Mode A trains on the data term only, mode B adds the singular-value
//! penalty at a fixed weight and mode C adapts the weight with the momentum
//! rule in [`crate::nala`]. Gradients of a batch are accumulated over fixed
//! chunks of eight samples and summed in chunk order, so results do not
//! depend on the number of worker threads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dti::{derive_metrics, fit_tensor_ols};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::mlp::{adam_step, backward, forward, init_params, params_from_bytes, params_to_bytes, AdamConfig, AdamState, Arch, MlpParams};
use crate::nala::{alternate, InnerProblem, NalaParams, OuterStepRecord};
use crate::patches::{covering_positions, patch_origins, patch_target};
use crate::phantom::{add_rician_noise, make_phantom, simulate_dwi, NoiseSpec, TensorField};
use crate::quality::{evaluate, EvalReport};
use crate::sampling::{apply_subsampling, electrostatic_directions, select_uniform, SubsamplingResult};
use crate::svdreg::{loss_and_grad_slices, LossBreakdown};
use crate::types::{Dims, DwiVolume, GradientScheme, Metric, MetricMaps, Patch};

/// Samples per gradient chunk.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(alias = "A")]
    Plain,
    #[serde(alias = "B")]
    SvdRegFixed,
    #[serde(alias = "C")]
    SvdRegNala,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Plain, Mode::SvdRegFixed, Mode::SvdRegNala];

    pub fn letter(self) -> char {
        match self {
            Mode::Plain => 'A',
            Mode::SvdRegFixed => 'B',
            Mode::SvdRegNala => 'C',
        }
    }

    pub fn uses_svd_reg(self) -> bool {
        self != Mode::Plain
    }

    pub fn uses_nala(self) -> bool {
        self == Mode::SvdRegNala
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::SvdRegFixed => "svd_reg_fixed",
            Mode::SvdRegNala => "svd_reg_nala",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "plain" => Ok(Mode::Plain),
            "B" | "b" | "svd_reg_fixed" => Ok(Mode::SvdRegFixed),
            "C" | "c" | "svd_reg_nala" => Ok(Mode::SvdRegNala),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected A/plain, B/svd_reg_fixed or C/svd_reg_nala)"
            ))),
        }
    }
}

/// Per-metric divisors applied to targets before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    pub fa: f64,
    pub md: f64,
    pub ad: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec { fa: 1.0, md: 3e-3, ad: 3e-3 }
    }
}

impl NormalizationSpec {
    pub fn scales(&self) -> [f64; 3] {
        [self.fa, self.md, self.ad]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in ["fa", "md", "ad"].iter().zip(self.scales()) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("normalization scale for {name} must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    fn apply(&self, maps: &MetricMaps, f: impl Fn(f64, f64) -> f64) -> MetricMaps {
        let mut out = maps.clone();
        for (m, s) in Metric::ALL.into_iter().zip(self.scales()) {
            out.get_mut(m).iter_mut().for_each(|v| *v = f(*v, s));
        }
        out
    }

    pub fn normalize(&self, maps: &MetricMaps) -> MetricMaps {
        self.apply(maps, |v, s| v / s)
    }

    pub fn denormalize(&self, maps: &MetricMaps) -> MetricMaps {
        self.apply(maps, |v, s| v * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { init: 0, shuffle: 1, noise: 2 }
    }
}

impl Seeds {
    /// All three seeds derived from one run seed.
    pub fn from_run(seed: u64) -> Self {
        Seeds {
            init: seed,
            shuffle: seed.wrapping_add(1_000),
            noise: seed.wrapping_add(2_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    /// Outer steps; each runs `inner_epochs` passes over the training set.
    pub epochs: usize,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub mode: Mode,
    /// λ for mode B.
    pub fixed_lambda: Option<f64>,
    pub nala: NalaParams,
    pub seeds: Seeds,
    pub normalization: NormalizationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 3,
            stride: 1,
            batch_size: 32,
            epochs: 40,
            inner_epochs: 1,
            learning_rate: 1e-3,
            hidden: vec![300, 300],
            mode: Mode::Plain,
            fixed_lambda: None,
            nala: NalaParams::default(),
            seeds: Seeds::default(),
            normalization: NormalizationSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("stride", self.stride),
            ("batch_size", self.batch_size),
            ("inner_epochs", self.inner_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer sizes must be at least 1".into()));
        }
        self.normalization.validate()?;
        match self.mode {
            Mode::Plain => {}
            Mode::SvdRegFixed => match self.fixed_lambda {
                Some(l) if l >= 0.0 && l.is_finite() => {}
                Some(l) => return Err(Error::InvalidArgument(format!("fixed_lambda must be >= 0, got {l}"))),
                None => return Err(Error::InvalidArgument("mode svd_reg_fixed requires fixed_lambda".into())),
            },
            Mode::SvdRegNala => self.nala.validate()?,
        }
        Ok(())
    }

    /// λ used for the first epoch.
    pub fn initial_lambda(&self) -> f64 {
        match self.mode {
            Mode::Plain => 0.0,
            Mode::SvdRegFixed => self.fixed_lambda.unwrap_or(0.0),
            Mode::SvdRegNala => self.nala.lambda0,
        }
    }

    pub fn arch(&self, channels: usize) -> Arch {
        let n3 = self.patch_size.pow(3);
        Arch {
            input: n3 * channels,
            hidden: self.hidden.clone(),
            output: n3 * 3,
        }
    }
}

/// Network input of one patch, `p * channels + c` layout: diffusion-weighted
/// channels divided by the voxel's mean b0, b0 channels divided by the
/// volume's mean masked b0. Voxels outside the mask or without positive b0
/// are 0.
pub fn encode_patch(volume: &DwiVolume, origin: [usize; 3], n: usize, mean_b0: f64) -> Vec<f64> {
    let dims = volume.dims();
    let scheme = volume.scheme();
    let channels = volume.n_dirs();
    let b0s = scheme.b0_indices();
    let mut out = Vec::with_capacity(n * n * n * channels);
    for dz in 0..n {
        for dy in 0..n {
            for dx in 0..n {
                let v = dims.index(origin[0] + dx, origin[1] + dy, origin[2] + dz);
                let b0 = b0s.iter().map(|&c| volume.signal(v, c)).sum::<f64>() / b0s.len().max(1) as f64;
                if !volume.mask()[v] || !(b0 > 0.0) {
                    out.extend(std::iter::repeat_n(0.0, channels));
                    continue;
                }
                for c in 0..channels {
                    let s = volume.signal(v, c);
                    out.push(if scheme.is_b0(c) { s / mean_b0 } else { -(s / b0).max(1e-3).ln() });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Cubic blocks of `block_size` voxels per edge are dealt to
/// train/val/test by a seeded shuffle, in proportion to `fractions`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub block_size: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: [0.6, 0.2, 0.2],
            block_size: 4,
            seed: 3,
        }
    }
}

/// Split of every voxel.
pub fn assign_blocks(dims: Dims, spec: &SplitSpec) -> Result<Vec<Split>> {
    let f = spec.fractions;
    if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {f:?} must be non-negative and sum to 1"
        )));
    }
    let b = spec.block_size;
    if b == 0 {
        return Err(Error::InvalidArgument("split block_size must be at least 1".into()));
    }
    let nb = [dims.w.div_ceil(b), dims.h.div_ceil(b), dims.s.div_ceil(b)];
    let n_blocks = nb[0] * nb[1] * nb[2];
    let cut1 = ((f[0] * n_blocks as f64).round() as usize).min(n_blocks);
    let cut2 = (((f[0] + f[1]) * n_blocks as f64).round() as usize).clamp(cut1, n_blocks);
    let mut order: Vec<usize> = (0..n_blocks).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut block_split = vec![Split::Train; n_blocks];
    for (rank, &k) in order.iter().enumerate() {
        block_split[k] = if rank < cut1 {
            Split::Train
        } else if rank < cut2 {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok((0..dims.n_voxels())
        .map(|v| {
            let [x, y, z] = dims.coords(v);
            block_split[((z / b) * nb[1] + y / b) * nb[0] + x / b]
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Metrics of the dense noiseless fit, physical units.
    pub gt: MetricMaps,
    /// Sparse noisy acquisition fed to the network.
    pub input: DwiVolume,
    pub input_scale: f64,
    /// Split of every voxel.
    pub voxel_split: Vec<Split>,
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
    pub test: Vec<Patch>,
    pub normalization: NormalizationSpec,
}

impl PreparedData {
    pub fn patches(&self, split: Split) -> &[Patch] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Brain voxels lying in blocks of `split`.
    pub fn split_mask(&self, split: Split) -> Vec<bool> {
        self.gt.mask.iter().zip(&self.voxel_split).map(|(&m, &s)| m && s == split).collect()
    }

    /// Scores normalized predictions against the normalized ground truth on
    /// one split.
    pub fn evaluate(&self, pred: &MetricMaps, split: Split) -> Result<EvalReport> {
        let n = self.normalization;
        evaluate(&n.normalize(pred), &n.normalize(&self.gt), &self.split_mask(split))
    }
}

/// Ground truth from the full noiseless scheme, inputs from the subsampled
/// noisy one, patches dealt to splits by spatial block. A patch is kept only
/// when all of its voxels share one split and its target is not all zero.
#[allow(clippy::too_many_arguments)]
pub fn prepare_dataset(
    field: &TensorField,
    full_scheme: &GradientScheme,
    subsampling: &SubsamplingResult,
    n_b0: usize,
    noise: NoiseSpec,
    split: &SplitSpec,
    patch_size: usize,
    stride: usize,
    normalization: NormalizationSpec,
) -> Result<PreparedData> {
    let full = simulate_dwi(field, full_scheme)?;
    let (fit, _) = fit_tensor_ols(&full)?;
    let gt = derive_metrics(&fit);
    let sparse = apply_subsampling(&full, subsampling, n_b0)?;
    let input = add_rician_noise(&sparse, noise)?;
    prepare_from_volumes(input, gt, split, patch_size, stride, normalization)
}

/// Patches from an existing network input volume and ground-truth maps in
/// physical units. Patch origins follow the ground-truth mask.
pub fn prepare_from_volumes(
    input: DwiVolume,
    gt: MetricMaps,
    split: &SplitSpec,
    patch_size: usize,
    stride: usize,
    normalization: NormalizationSpec,
) -> Result<PreparedData> {
    normalization.validate()?;
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size ({patch_size}) and stride ({stride}) must both be at least 1"
        )));
    }
    let dims = gt.dims;
    if input.dims() != dims {
        return Err(Error::DimensionMismatch {
            left_name: "input volume",
            left: input.dims().as_array().to_vec(),
            right_name: "ground truth",
            right: dims.as_array().to_vec(),
        });
    }
    if dims.as_array().iter().any(|&d| d < patch_size) {
        return Err(Error::InvalidArgument(format!(
            "volume {:?} is smaller than the patch size {patch_size}",
            dims.as_array()
        )));
    }
    input.scheme().require_b0()?;
    let voxel_split = assign_blocks(dims, split)?;
    let input_scale = input.mean_b0()?;
    let targets = normalization.normalize(&gt);

    let mut sets: [Vec<Patch>; 3] = Default::default();
    for origin in patch_origins(dims, &gt.mask, patch_size, stride) {
        let s = voxel_split[dims.index(origin[0], origin[1], origin[2])];
        let n = patch_size;
        let uniform = (0..n).all(|dz| (0..n).all(|dy| (0..n).all(|dx| voxel_split[dims.index(origin[0] + dx, origin[1] + dy, origin[2] + dz)] == s)));
        if !uniform {
            continue;
        }
        let target = patch_target(&targets, origin, patch_size);
        if target.iter().all(|&t| t == 0.0) {
            continue;
        }
        let idx = match s {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        sets[idx].push(Patch {
            origin,
            size: patch_size,
            channels: input.n_dirs(),
            signal: encode_patch(&input, origin, patch_size, input_scale),
            target,
        });
    }
    let [train, val, test] = sets;
    Ok(PreparedData {
        gt,
        input,
        input_scale,
        voxel_split,
        train,
        val,
        test,
        normalization,
    })
}

/// Synthetic benchmark: phantom, dense single-shell scheme and its sparse
/// subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dims: [usize; 3],
    pub preset: String,
    pub phantom_seed: u64,
    pub bval: f64,
    pub full_directions: usize,
    pub sparse_directions: usize,
    pub n_b0: usize,
    pub scheme_seed: u64,
    pub subsample_restarts: usize,
    /// Rician σ relative to the mean masked b0.
    pub noise_sigma: f64,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dims: [24, 24, 24],
            preset: "mixed".into(),
            phantom_seed: 7,
            bval: 1000.0,
            full_directions: 90,
            sparse_directions: 6,
            n_b0: 1,
            scheme_seed: 11,
            subsample_restarts: 8,
            noise_sigma: 0.025,
            split: SplitSpec::default(),
        }
    }
}

/// Dense scheme (one b0 first) and the selected sparse subset.
pub fn benchmark_schemes(cfg: &DataConfig) -> Result<(GradientScheme, SubsamplingResult)> {
    let dirs = electrostatic_directions(cfg.full_directions, cfg.scheme_seed, 200);
    let full = GradientScheme::single_shell(cfg.bval, &dirs)?;
    let sub = select_uniform(&full, cfg.sparse_directions, cfg.subsample_restarts.max(1), cfg.scheme_seed)?;
    Ok((full, sub))
}

pub fn build_dataset(cfg: &DataConfig, noise_seed: u64, patch_size: usize, stride: usize, normalization: NormalizationSpec) -> Result<PreparedData> {
    let [w, h, s] = cfg.dims;
    let field = make_phantom(Dims::new(w, h, s), &cfg.preset, cfg.phantom_seed)?;
    let (full, sub) = benchmark_schemes(cfg)?;
    let noise = NoiseSpec {
        sigma: cfg.noise_sigma,
        seed: noise_seed,
    };
    prepare_dataset(&field, &full, &sub, cfg.n_b0, noise, &cfg.split, patch_size, stride, normalization)
}

/// One line of the training history. Epoch 0 is the evaluation before any
/// update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub train: Option<LossBreakdown>,
    pub val: Option<LossBreakdown>,
    pub nala: Option<OuterStepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation total (the last ones when there
    /// is no validation set). After divergence, the last good parameters.
    pub params: MlpParams,
    pub selected_epoch: usize,
    pub selected_lambda: f64,
    pub history: Vec<EpochRecord>,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.history {
            s.push_str(&serde_json::to_string(r).expect("history records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn selected_val(&self) -> Option<LossBreakdown> {
        self.history.iter().find(|r| r.epoch == self.selected_epoch).and_then(|r| r.val)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, channels: usize) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                arch: self.params.arch.clone(),
                patch_size: cfg.patch_size,
                channels,
                normalization: cfg.normalization,
                mode: cfg.mode,
                lambda: self.selected_lambda,
                epoch: self.selected_epoch,
                seeds: cfg.seeds,
                dtype: "float32".into(),
            },
            params: self.params.clone(),
        }
    }
}

fn batch_input(patches: &[Patch], idx: &[usize]) -> Vec<f64> {
    let mut x = Vec::with_capacity(idx.len() * patches[idx[0]].signal.len());
    for &i in idx {
        x.extend_from_slice(&patches[i].signal);
    }
    x
}

struct ChunkResult {
    data: f64,
    reg: f64,
    grads: Option<MlpParams>,
}

/// Loss sums over `idx` and, when `with_grad`, gradients of the mean loss
/// over `mean_over` samples.
fn chunked_loss(params: &MlpParams, patches: &[Patch], idx: &[usize], lambda: f64, with_grad: bool, mean_over: usize) -> Result<(f64, f64, Option<MlpParams>)> {
    let parts: Vec<Result<ChunkResult>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let x = batch_input(patches, chunk);
            let (out, tape) = forward(params, &x, chunk.len())?;
            let width = params.arch.output;
            let mut og = vec![0.0; out.len()];
            let (mut data, mut reg) = (0.0, 0.0);
            for (b, &i) in chunk.iter().enumerate() {
                let pred = &out[b * width..(b + 1) * width];
                let (loss, g) = loss_and_grad_slices(pred, &patches[i].target, lambda)?;
                data += loss.data_term;
                reg += loss.reg_term;
                if with_grad {
                    let scale = 1.0 / mean_over as f64;
                    og[b * width..(b + 1) * width].iter_mut().zip(&g).for_each(|(o, gi)| *o = gi * scale);
                }
            }
            let grads = if with_grad { Some(backward(params, &tape, &og)?) } else { None };
            Ok(ChunkResult { data, reg, grads })
        })
        .collect();
    let (mut data, mut reg) = (0.0, 0.0);
    let mut total: Option<MlpParams> = None;
    for p in parts {
        let p = p?;
        data += p.data;
        reg += p.reg;
        if let Some(g) = p.grads {
            match total.as_mut() {
                Some(t) => t.add_assign(&g),
                None => total = Some(g),
            }
        }
    }
    Ok((data, reg, total))
}

/// Mean loss of `params` over a patch set.
pub fn dataset_loss(params: &MlpParams, patches: &[Patch], lambda: f64) -> Result<LossBreakdown> {
    if patches.is_empty() {
        return Err(Error::Empty("patch set"));
    }
    let idx: Vec<usize> = (0..patches.len()).collect();
    let (data, reg, _) = chunked_loss(params, patches, &idx, lambda, false, 1)?;
    let n = patches.len() as f64;
    Ok(LossBreakdown::new(data / n, reg / n, lambda))
}

struct Inner<'a> {
    params: MlpParams,
    adam: AdamState,
    train: &'a [Patch],
    val: &'a [Patch],
    batch_size: usize,
    inner_epochs: usize,
    shuffle_seed: u64,
    passes: usize,
    outer: usize,
    history: Vec<EpochRecord>,
    best: Option<(MlpParams, usize, f64)>,
}

impl Inner<'_> {
    fn diverged(&self) -> Error {
        Error::Diverged { epoch: self.outer + 1 }
    }

    fn pass(&mut self, lambda: f64) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(self.passes as u64);
        order.shuffle(&mut rng);
        let (mut data, mut reg) = (0.0, 0.0);
        for batch in order.chunks(self.batch_size) {
            let (d, r, g) = chunked_loss(&self.params, self.train, batch, lambda, true, batch.len())?;
            if !(d.is_finite() && r.is_finite()) {
                return Err(self.diverged());
            }
            let g = g.expect("gradients requested");
            match adam_step(&mut self.params, &g, &mut self.adam) {
                Err(Error::NonFinite(_)) => return Err(self.diverged()),
                other => other?,
            }
            if !self.params.is_finite() {
                return Err(self.diverged());
            }
            data += d;
            reg += r;
        }
        self.passes += 1;
        let n = self.train.len() as f64;
        Ok(LossBreakdown::new(data / n, reg / n, lambda))
    }
}

impl InnerProblem for Inner<'_> {
    fn train_epoch(&mut self, lambda: f64) -> Result<LossBreakdown> {
        let mut last = None;
        for _ in 0..self.inner_epochs {
            last = Some(self.pass(lambda)?);
        }
        self.outer += 1;
        let train = last.expect("inner_epochs >= 1");
        self.history.push(EpochRecord {
            epoch: self.outer,
            lambda,
            train: Some(train),
            val: None,
            nala: None,
        });
        Ok(train)
    }

    fn validation_loss(&mut self, lambda: f64) -> Result<LossBreakdown> {
        let val = dataset_loss(&self.params, self.val, lambda)?;
        if !val.total.is_finite() {
            return Err(self.diverged());
        }
        match self.history.last_mut() {
            Some(r) if r.epoch == self.outer => r.val = Some(val),
            _ => self.history.push(EpochRecord {
                epoch: self.outer,
                lambda,
                train: None,
                val: Some(val),
                nala: None,
            }),
        }
        Ok(val)
    }

    fn validation_size(&self) -> usize {
        self.val.len()
    }

    fn keep_best(&mut self, _step: usize, lambda: f64) {
        self.best = Some((self.params.clone(), self.outer, lambda));
    }
}

/// Trains one model. Divergence is reported through
/// [`TrainOutcome::status`] with the last good parameters retained.
pub fn train(config: &TrainConfig, train_set: &[Patch], val_set: &[Patch]) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_set.first().ok_or(Error::Empty("training set"))?;
    if config.mode.uses_nala() && val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if first.size != config.patch_size {
        return Err(Error::InvalidArgument(format!(
            "patches have size {} but the config asks for {}",
            first.size, config.patch_size
        )));
    }
    let arch = config.arch(first.channels);
    for p in train_set.iter().chain(val_set) {
        if p.signal.len() != arch.input || p.target.len() != arch.output {
            return Err(Error::Shape {
                expected: format!("patches with {} inputs and {} targets", arch.input, arch.output),
                actual: format!("{} inputs and {} targets at {:?}", p.signal.len(), p.target.len(), p.origin),
            });
        }
    }
    let params = init_params(&arch, config.seeds.init)?;
    let adam = AdamState::new(
        &params,
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut inner = Inner {
        params,
        adam,
        train: train_set,
        val: val_set,
        batch_size: config.batch_size,
        inner_epochs: config.inner_epochs,
        shuffle_seed: config.seeds.shuffle,
        passes: 0,
        outer: 0,
        history: Vec::new(),
        best: None,
    };
    let lambda = config.initial_lambda();

    let run: Result<Option<Vec<OuterStepRecord>>> = match config.mode {
        Mode::SvdRegNala => alternate(&mut inner, &config.nala, config.epochs).map(|h| Some(h.steps.into_iter().map(|s| s.record).collect())),
        _ => (|| {
            if !val_set.is_empty() && config.epochs > 0 {
                inner.validation_loss(lambda)?;
            }
            let mut best_total = f64::INFINITY;
            for _ in 0..config.epochs {
                inner.train_epoch(lambda)?;
                if !val_set.is_empty() {
                    let v = inner.validation_loss(lambda)?;
                    if v.total < best_total {
                        best_total = v.total;
                        inner.keep_best(inner.outer, lambda);
                    }
                }
            }
            Ok(None)
        })(),
    };

    let status = match run {
        Ok(Some(records)) => {
            for (r, rec) in inner.history.iter_mut().filter(|r| r.epoch > 0).zip(records) {
                r.nala = Some(rec);
            }
            TrainStatus::Completed
        }
        Ok(None) => TrainStatus::Completed,
        Err(Error::Diverged { epoch }) => {
            // drop the partial record of the failed epoch
            inner.history.retain(|r| r.epoch < epoch);
            TrainStatus::Diverged { epoch }
        }
        Err(e) => return Err(e),
    };
    let (params, selected_epoch, selected_lambda) = match (inner.best.take(), status) {
        (Some(b), _) => b,
        (None, TrainStatus::Completed) => (inner.params, inner.outer, lambda),
        // nothing validated yet: the initialization is the last good state
        (None, TrainStatus::Diverged { .. }) => (init_params(&arch, config.seeds.init)?, 0, lambda),
    };
    Ok(TrainOutcome {
        params,
        selected_epoch,
        selected_lambda,
        history: inner.history,
        status,
    })
}

pub const CHECKPOINT_FORMAT: &str = "dtinet-mlp-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: Arch,
    pub patch_size: usize,
    pub channels: usize,
    pub normalization: NormalizationSpec,
    pub mode: Mode,
    pub lambda: f64,
    pub epoch: usize,
    pub seeds: Seeds,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: MlpParams,
}

/// `<stem>.ckpt.json` and `<stem>.ckpt.raw` for any of `stem`,
/// `stem.ckpt.json` or `stem.ckpt.raw`.
pub fn checkpoint_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref().to_string_lossy().into_owned();
    let stem = p
        .strip_suffix(".ckpt.json")
        .or_else(|| p.strip_suffix(".ckpt.raw"))
        .unwrap_or(&p)
        .to_string();
    (PathBuf::from(format!("{stem}.ckpt.json")), PathBuf::from(format!("{stem}.ckpt.raw")))
}

/// Header as JSON plus float32 little-endian weights and biases, layer by
/// layer.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let (json, raw) = checkpoint_paths(path);
    write_atomic(&raw, &params_to_bytes(&ckpt.params))?;
    write_json(&json, &ckpt.header)?;
    Ok((json, raw))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let (json, raw) = checkpoint_paths(path);
    let header: CheckpointHeader = read_json(&json)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::malformed(&json, format!("unknown checkpoint format '{}'", header.format)));
    }
    if header.dtype != "float32" {
        return Err(Error::malformed(&json, format!("unsupported checkpoint dtype '{}'", header.dtype)));
    }
    let n3 = header.patch_size.pow(3);
    if header.arch.input != n3 * header.channels || header.arch.output != n3 * 3 {
        return Err(Error::malformed(&json, "architecture does not match patch size and channel count"));
    }
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.arch.n_params() as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: raw,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let params = params_from_bytes(&header.arch, &bytes)?;
    Ok(Checkpoint { header, params })
}

/// Tiles the volume with patches at stride `patch_size` (plus a final tile
/// flush with each far edge), predicts, averages overlaps and undoes the
/// target normalization. FA is clipped to [0, 1]; voxels outside the mask
/// are 0.
pub fn infer_with(params: &MlpParams, patch_size: usize, normalization: &NormalizationSpec, volume: &DwiVolume) -> Result<MetricMaps> {
    let n = patch_size;
    let n3 = n.pow(3);
    let channels = volume.n_dirs();
    if params.arch.input != n3 * channels {
        return Err(Error::InvalidArgument(format!(
            "network expects {} directions per voxel but the volume has {channels}",
            params.arch.input / n3.max(1)
        )));
    }
    if params.arch.output != n3 * 3 {
        return Err(Error::InvalidArgument(format!(
            "network output {} does not match patch size {n}",
            params.arch.output
        )));
    }
    let dims = volume.dims();
    if dims.as_array().iter().any(|&d| d < n) {
        return Err(Error::InvalidArgument(format!(
            "volume {:?} is smaller than the patch size {n}",
            dims.as_array()
        )));
    }
    let scale = volume.mean_b0()?;
    let mask = volume.mask();
    let covers_brain = |o: &[usize; 3]| {
        (0..n).any(|dz| (0..n).any(|dy| (0..n).any(|dx| mask[dims.index(o[0] + dx, o[1] + dy, o[2] + dz)])))
    };
    let mut origins = Vec::new();
    for &z in &covering_positions(dims.s, n, n) {
        for &y in &covering_positions(dims.h, n, n) {
            for &x in &covering_positions(dims.w, n, n) {
                origins.push([x, y, z]);
            }
        }
    }
    origins.retain(covers_brain);
    let outputs: Vec<Result<Vec<f64>>> = origins
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut x = Vec::with_capacity(chunk.len() * params.arch.input);
            for &o in chunk {
                x.extend(encode_patch(volume, o, n, scale));
            }
            forward(params, &x, chunk.len()).map(|(out, _)| out)
        })
        .collect();
    let nv = dims.n_voxels();
    let mut sums = vec![[0.0f64; 3]; nv];
    let mut counts = vec![0u32; nv];
    for (chunk, out) in origins.chunks(CHUNK).zip(outputs) {
        let out = out?;
        for (b, o) in chunk.iter().enumerate() {
            let block = &out[b * n3 * 3..(b + 1) * n3 * 3];
            let mut p = 0;
            for dz in 0..n {
                for dy in 0..n {
                    for dx in 0..n {
                        let v = dims.index(o[0] + dx, o[1] + dy, o[2] + dz);
                        for m in 0..3 {
                            sums[v][m] += block[p * 3 + m];
                        }
                        counts[v] += 1;
                        p += 1;
                    }
                }
            }
        }
    }
    let mut maps = MetricMaps::zeros(dims, mask.to_vec());
    let scales = normalization.scales();
    for v in 0..nv {
        if !mask[v] || counts[v] == 0 {
            continue;
        }
        let c = counts[v] as f64;
        maps.fa[v] = (sums[v][0] / c * scales[0]).clamp(0.0, 1.0);
        maps.md[v] = sums[v][1] / c * scales[1];
        maps.ad[v] = sums[v][2] / c * scales[2];
    }
    Ok(maps)
}

pub fn infer(ckpt: &Checkpoint, volume: &DwiVolume) -> Result<MetricMaps> {
    if volume.n_dirs() != ckpt.header.channels {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained on {} directions but the volume has {}",
            ckpt.header.channels,
            volume.n_dirs()
        )));
    }
    infer_with(&ckpt.params, ckpt.header.patch_size, &ckpt.header.normalization, volume)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_data(split: SplitSpec) -> PreparedData {
        let cfg = DataConfig {
            dims: [12, 12, 12],
            full_directions: 30,
            noise_sigma: 0.0,
            split,
            ..DataConfig::default()
        };
        build_dataset(&cfg, 0, 3, 1, NormalizationSpec::default()).unwrap()
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let spec = SplitSpec {
            fractions: [0.5, 0.2, 0.2],
            ..SplitSpec::default()
        };
        assert!(matches!(assign_blocks(Dims::cube(24), &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn blocks_follow_fractions() {
        let s = assign_blocks(Dims::cube(24), &SplitSpec::default()).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count() / 64;
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (130, 43, 43));
        assert_eq!(s, assign_blocks(Dims::cube(24), &SplitSpec::default()).unwrap());
    }

    #[test]
    fn everything_in_train() {
        let d = small_data(SplitSpec {
            fractions: [1.0, 0.0, 0.0],
            ..SplitSpec::default()
        });
        assert!(!d.train.is_empty());
        assert!(d.val.is_empty() && d.test.is_empty());
    }

    #[test]
    fn splits_are_disjoint() {
        let d = small_data(SplitSpec {
            fractions: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            block_size: 4,
            seed: 5,
        });
        for split in [Split::Train, Split::Val, Split::Test] {
            for p in d.patches(split) {
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let v = d.gt.dims.index(p.origin[0] + dx, p.origin[1] + dy, p.origin[2] + dz);
                            assert_eq!(d.voxel_split[v], split);
                        }
                    }
                }
                assert!(p.target.iter().any(|&t| t != 0.0));
            }
        }
    }

    #[test]
    fn normalization_round_trip() {
        let d = small_data(SplitSpec::default());
        let n = NormalizationSpec::default();
        let back = n.denormalize(&n.normalize(&d.gt));
        for m in Metric::ALL {
            for (a, b) in back.get(m).iter().zip(d.gt.get(m)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode_b_needs_lambda() {
        let cfg = TrainConfig {
            mode: Mode::SvdRegFixed,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("B".parse::<Mode>().unwrap(), Mode::SvdRegFixed);
        assert_eq!("svd_reg_nala".parse::<Mode>().unwrap(), Mode::SvdRegNala);
        assert!("D".parse::<Mode>().is_err());
        let m: Mode = serde_json::from_str("\"A\"").unwrap();
        assert_eq!(m, Mode::Plain);
    }

    #[test]
    fn constant_network_gives_constant_maps() {
        let d = small_data(SplitSpec::default());
        let cfg = TrainConfig {
            hidden: vec![],
            ..TrainConfig::default()
        };
        let arch = cfg.arch(d.input.n_dirs());
        let mut params = MlpParams::zeros(&arch);
        for (i, b) in params.biases[0].iter_mut().enumerate() {
            *b = [0.5, 0.25, 0.5][i % 3];
        }
        for patch_size in [3] {
            let maps = infer_with(&params, patch_size, &cfg.normalization, &d.input).unwrap();
            for v in 0..maps.dims.n_voxels() {
                if maps.mask[v] {
                    assert!((maps.fa[v] - 0.5).abs() < 1e-15);
                    assert!((maps.md[v] - 0.75e-3).abs() < 1e-15);
                    assert!((maps.ad[v] - 1.5e-3).abs() < 1e-15);
                } else {
                    assert_eq!((maps.fa[v], maps.md[v], maps.ad[v]), (0.0, 0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn direction_mismatch_names_both_counts() {
        let d = small_data(SplitSpec::default());
        let arch = TrainConfig::default().arch(5);
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                arch: arch.clone(),
                patch_size: 3,
                channels: 5,
                normalization: NormalizationSpec::default(),
                mode: Mode::Plain,
                lambda: 0.0,
                epoch: 0,
                seeds: Seeds::default(),
                dtype: "float32".into(),
            },
            params: MlpParams::zeros(&arch),
        };
        let msg = infer(&ckpt, &d.input).unwrap_err().to_string();
        assert!(msg.contains('5') && msg.contains('7'), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = TrainConfig::default().arch(7);
        let params = init_params(&Arch { hidden: vec![4], ..arch }, 3).unwrap();
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                arch: params.arch.clone(),
                patch_size: 3,
                channels: 7,
                normalization: NormalizationSpec::default(),
                mode: Mode::SvdRegNala,
                lambda: 0.05,
                epoch: 3,
                seeds: Seeds::default(),
                dtype: "float32".into(),
            },
            params,
        };
        let (json, _) = write_checkpoint(&ckpt, dir.path().join("m")).unwrap();
        let back = read_checkpoint(&json).unwrap();
        assert_eq!(back.header, ckpt.header);
        for (a, b) in back.params.tensors().zip(ckpt.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn paths_accept_any_form() {
        for p in ["out/m", "out/m.ckpt.json", "out/m.ckpt.raw"] {
            let (j, r) = checkpoint_paths(p);
            assert_eq!(j, PathBuf::from("out/m.ckpt.json"));
            assert_eq!(r, PathBuf::from("out/m.ckpt.raw"));
        }
    }
}
