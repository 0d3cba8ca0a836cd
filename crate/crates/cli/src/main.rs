//! `dtinet` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, missing or
//! malformed files, incompatible inputs), 2 runtime failure (divergence,
//! numerical breakdown, failed ablation mode). Errors are printed as a
//! single line starting with `ERROR[<exit code>]:`.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dtinet::ablation::{run_ablation, AblationConfig};
use dtinet::dti::{derive_metrics, fit_tensor_ols};
use dtinet::io::{self, Dtype};
use dtinet::phantom::{add_rician_noise, make_phantom, simulate_dwi, NoiseSpec, PRESETS};
use dtinet::quality::{evaluate, markdown_table};
use dtinet::render::{default_range, render_residual, render_slice, Axis};
use dtinet::sampling::{apply_subsampling, electrostatic_directions, select_uniform};
use dtinet::trainer::{
    build_dataset, infer, prepare_from_volumes, read_checkpoint, train, write_checkpoint, DataConfig, Mode, NormalizationSpec, Seeds, TrainConfig, TrainStatus,
};
use dtinet::{Dims, Error, GradientScheme, Result};

use manifest::{hash_all, RunManifest};

#[derive(Parser)]
#[command(name = "dtinet", version, about = "DTI metric estimation from sparse diffusion data")]
struct Cli {
    /// Worker threads; 1 gives the strict reproducibility mode.
    #[arg(long, global = true, env = "DTINET_THREADS")]
    threads: Option<usize>,
    /// Manifest path (defaults next to the primary output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::Float32,
            DtypeArg::F64 => Dtype::Float64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tensor phantom, optionally with its noiseless DWI and metric maps.
    Phantom(PhantomArgs),
    /// Add Rician noise to a DWI volume.
    Noise(NoiseArgs),
    /// Select a uniform subset of gradient directions.
    Subsample(SubsampleArgs),
    /// Log-linear least-squares tensor fit and metric maps.
    Fit(FitArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Predict metric maps with a trained network.
    Infer(InferArgs),
    /// Compare metric maps (MSE, SSIM, PSNR).
    Eval(EvalArgs),
    /// Train and compare the plain, fixed-λ and adaptive-λ variants.
    Ablate(AblateArgs),
    /// Write one slice of a volume as a 16-bit PGM.
    Render(RenderArgs),
    /// Recompute the hashes recorded in a manifest.
    Verify { manifest_file: PathBuf },
}

#[derive(Args)]
struct PhantomArgs {
    /// Output tensor field volume.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "mixed")]
    preset: String,
    /// `N` or `W,H,S`.
    #[arg(long, default_value = "24")]
    dims: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the noiseless DWI here.
    #[arg(long)]
    dwi: Option<PathBuf>,
    /// Also write analytic FA/MD/AD maps with this prefix.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Diffusion-weighted directions of the generated scheme (one b0 is added).
    #[arg(long, default_value_t = 90)]
    directions: usize,
    #[arg(long, default_value_t = 1000.0)]
    bval: f64,
    #[arg(long, default_value_t = 11)]
    scheme_seed: u64,
    /// FSL bvals file; with --bvecs replaces the generated scheme.
    #[arg(long, requires = "bvecs")]
    bvals: Option<PathBuf>,
    #[arg(long, requires = "bvals")]
    bvecs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Noise σ relative to the mean masked b0.
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(short, long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// b0 entries kept in front of the selected directions.
    #[arg(long, default_value_t = 1)]
    n_b0: usize,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Prefix of the FA/MD/AD maps.
    #[arg(long)]
    out: PathBuf,
    /// Also write the fitted tensor field.
    #[arg(long)]
    tensors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output stem for `<stem>.ckpt.json`, `<stem>.ckpt.raw` and `<stem>.history.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Network input volume; with --gt replaces the synthetic benchmark data.
    #[arg(long, requires = "gt")]
    input: Option<PathBuf>,
    /// Ground-truth metric map prefix.
    #[arg(long, requires = "input")]
    gt: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Derives init, shuffle and noise seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Prefix of the predicted maps.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted map prefix.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth map prefix.
    #[arg(long)]
    gt: PathBuf,
    /// Volume whose mask restricts the evaluation (default: ground-truth mask).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write a markdown table.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Divisors for FA, MD, AD before scoring.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 3e-3, 3e-3])]
    normalization: Vec<f64>,
    /// Row label in the table.
    #[arg(long, default_value = "prediction")]
    label: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Channel index or label (e.g. FA).
    #[arg(long, default_value = "0")]
    channel: String,
    #[arg(long, default_value = "z")]
    axis: String,
    #[arg(long)]
    slice: usize,
    #[arg(long)]
    out: PathBuf,
    /// Value mapped to white (default: the masked maximum).
    #[arg(long)]
    range: Option<f64>,
    /// Reference volume for an absolute-residual image.
    #[arg(long, requires = "residual_out")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    residual_out: Option<PathBuf>,
}

/// Resolved config of `train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRunConfig {
    data: DataConfig,
    train: TrainConfig,
}

struct Outcome {
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
    /// Runtime failure reported after the outputs were written.
    failure: Option<Error>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let s = path.to_string_lossy();
    let stem = [".vol.json", ".vol.raw", ".json", ".pgm"]
        .iter()
        .find_map(|ext| s.strip_suffix(ext))
        .unwrap_or(&s);
    PathBuf::from(format!("{stem}{suffix}"))
}

fn volume_files(path: &Path) -> Vec<PathBuf> {
    let (j, r) = io::volume_paths(path);
    vec![j, r]
}

fn parse_dims(s: &str) -> Result<Dims> {
    let parts: std::result::Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match parts.map_err(|_| ()).as_deref() {
        Ok([n]) => Ok(Dims::cube(*n)),
        Ok([w, h, d]) => Ok(Dims::new(*w, *h, *d)),
        _ => Err(Error::InvalidArgument(format!("dims must be N or W,H,S, got '{s}'"))),
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn cmd_phantom(a: &PhantomArgs) -> Result<Outcome> {
    if !PRESETS.contains(&a.preset.as_str()) {
        return Err(Error::UnknownPreset {
            name: a.preset.clone(),
            available: PRESETS.join(", "),
        });
    }
    let dims = parse_dims(&a.dims)?;
    let mut inputs = Vec::new();
    let scheme = match (&a.bvals, &a.bvecs) {
        (Some(bv), Some(bc)) => {
            inputs.extend([bv.clone(), bc.clone()]);
            io::read_fsl_scheme(bv, bc)?
        }
        _ => GradientScheme::single_shell(a.bval, &electrostatic_directions(a.directions, a.scheme_seed, 200))?,
    };
    let field = make_phantom(dims, &a.preset, a.seed)?;
    let dwi = a.dwi.as_ref().map(|_| simulate_dwi(&field, &scheme)).transpose()?;
    let dtype: Dtype = a.dtype.into();
    let mut outputs = Vec::new();
    io::write_raw_volume(&field.to_raw(), &a.out, dtype)?;
    outputs.extend(volume_files(&a.out));
    if let (Some(p), Some(v)) = (&a.dwi, &dwi) {
        io::write_volume(v, p, dtype)?;
        outputs.extend(volume_files(p));
    }
    if let Some(prefix) = &a.maps {
        outputs.extend(io::write_metric_maps(&derive_metrics(&field), prefix, dtype)?);
    }
    Ok(Outcome {
        config: serde_json::json!({
            "preset": a.preset, "dims": dims.as_array(), "seed": a.seed, "directions": scheme.dw_indices().len(),
            "bval": a.bval, "scheme_seed": a.scheme_seed, "dtype": format!("{:?}", dtype),
        }),
        seeds: BTreeMap::from([("phantom".into(), a.seed), ("scheme".into(), a.scheme_seed)]),
        inputs,
        outputs,
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_noise(a: &NoiseArgs) -> Result<Outcome> {
    let vol = io::read_volume(&a.input)?;
    let noisy = add_rician_noise(&vol, NoiseSpec { sigma: a.sigma, seed: a.seed })?;
    io::write_volume(&noisy, &a.out, a.dtype.into())?;
    Ok(Outcome {
        config: serde_json::json!({ "sigma": a.sigma, "seed": a.seed }),
        seeds: BTreeMap::from([("noise".into(), a.seed)]),
        inputs: volume_files(&a.input),
        outputs: volume_files(&a.out),
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_subsample(a: &SubsampleArgs) -> Result<Outcome> {
    let vol = io::read_volume(&a.input)?;
    let sel = select_uniform(vol.scheme(), a.k, a.restarts, a.seed)?;
    let sparse = apply_subsampling(&vol, &sel, a.n_b0)?;
    let sel_path = with_suffix(&a.out, ".selection.json");
    io::write_volume(&sparse, &a.out, a.dtype.into())?;
    let (bval, bvec) = (with_suffix(&a.out, ".bval"), with_suffix(&a.out, ".bvec"));
    io::write_json(&sel_path, &sel)?;
    io::write_fsl_scheme(sparse.scheme(), &bval, &bvec)?;
    let mut outputs = volume_files(&a.out);
    outputs.extend([sel_path, bval, bvec]);
    Ok(Outcome {
        config: serde_json::json!({ "k": a.k, "restarts": a.restarts, "seed": a.seed, "n_b0": a.n_b0 }),
        seeds: BTreeMap::from([("subsample".into(), a.seed)]),
        inputs: volume_files(&a.input),
        outputs,
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_fit(a: &FitArgs) -> Result<Outcome> {
    let vol = io::read_volume(&a.input)?;
    let (field, report) = fit_tensor_ols(&vol)?;
    let maps = derive_metrics(&field);
    let dtype: Dtype = a.dtype.into();
    let mut outputs = io::write_metric_maps(&maps, &a.out, dtype)?;
    if let Some(t) = &a.tensors {
        io::write_raw_volume(&field.to_raw(), t, dtype)?;
        outputs.extend(volume_files(t));
    }
    let rp = with_suffix(&a.out, ".fit.json");
    io::write_json(&rp, &report)?;
    outputs.push(rp);
    Ok(Outcome {
        config: serde_json::json!({ "dtype": format!("{:?}", dtype) }),
        seeds: BTreeMap::new(),
        inputs: volume_files(&a.input),
        outputs,
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let mut sets = a.cfg.sets.clone();
    if let Some(m) = &a.mode {
        sets.push(format!("train.mode=\"{}\"", m.parse::<Mode>()?));
    }
    if let Some(e) = a.epochs {
        sets.push(format!("train.epochs={e}"));
    }
    if let Some(l) = a.lambda {
        sets.push(format!("train.fixed_lambda={l:?}"));
        sets.push(format!("train.nala.lambda0={l:?}"));
    }
    if let Some(lr) = a.lr {
        sets.push(format!("train.learning_rate={lr:?}"));
    }
    let mut rc: TrainRunConfig = config::load(a.cfg.config.as_deref(), &sets)?;
    if let Some(s) = a.seed {
        rc.train.seeds = Seeds::from_run(s);
    }
    rc.train.validate()?;
    let tc = &rc.train;
    let mut inputs = a.cfg.config.iter().cloned().collect::<Vec<_>>();
    let data = match (&a.input, &a.gt) {
        (Some(i), Some(g)) => {
            inputs.extend(volume_files(i));
            inputs.extend(io::metric_map_paths(g).iter().flat_map(|p| volume_files(p)));
            prepare_from_volumes(io::read_volume(i)?, io::read_metric_maps(g)?, &rc.data.split, tc.patch_size, tc.stride, tc.normalization)?
        }
        _ => build_dataset(&rc.data, tc.seeds.noise, tc.patch_size, tc.stride, tc.normalization)?,
    };
    let outcome = train(tc, &data.train, &data.val)?;
    let ckpt = outcome.checkpoint(tc, data.input.n_dirs());
    let hist = with_suffix(&a.out, ".history.jsonl");
    io::write_atomic(&hist, outcome.history_jsonl().as_bytes())?;
    let (cj, cr) = write_checkpoint(&ckpt, &a.out)?;
    let failure = match outcome.status {
        TrainStatus::Completed => None,
        TrainStatus::Diverged { epoch } => Some(Error::Diverged { epoch }),
    };
    Ok(Outcome {
        config: to_json(&rc),
        seeds: BTreeMap::from([
            ("init".into(), tc.seeds.init),
            ("shuffle".into(), tc.seeds.shuffle),
            ("noise".into(), tc.seeds.noise),
            ("split".into(), rc.data.split.seed),
        ]),
        inputs,
        outputs: vec![cj, cr, hist],
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure,
    })
}

fn cmd_infer(a: &InferArgs) -> Result<Outcome> {
    let ckpt = read_checkpoint(&a.model)?;
    let vol = io::read_volume(&a.input)?;
    let maps = infer(&ckpt, &vol)?;
    let outputs = io::write_metric_maps(&maps, &a.out, a.dtype.into())?;
    let (cj, cr) = dtinet::trainer::checkpoint_paths(&a.model);
    let mut inputs = vec![cj, cr];
    inputs.extend(volume_files(&a.input));
    Ok(Outcome {
        config: serde_json::json!({ "model": a.model, "patch_size": ckpt.header.patch_size }),
        seeds: BTreeMap::new(),
        inputs,
        outputs,
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    if a.normalization.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "--normalization takes three values (FA,MD,AD), got {}",
            a.normalization.len()
        )));
    }
    let norm = NormalizationSpec {
        fa: a.normalization[0],
        md: a.normalization[1],
        ad: a.normalization[2],
    };
    norm.validate()?;
    let pred = io::read_metric_maps(&a.pred)?;
    let gt = io::read_metric_maps(&a.gt)?;
    let mut inputs: Vec<PathBuf> = io::metric_map_paths(&a.pred).iter().chain(&io::metric_map_paths(&a.gt)).flat_map(|p| volume_files(p)).collect();
    let mask = match &a.mask {
        Some(m) => {
            inputs.extend(volume_files(m));
            let raw = io::read_raw_volume(m)?;
            if raw.dims != gt.dims {
                return Err(Error::DimensionMismatch {
                    left_name: "mask volume",
                    left: raw.dims.as_array().to_vec(),
                    right_name: "maps",
                    right: gt.dims.as_array().to_vec(),
                });
            }
            raw.mask
        }
        None => gt.mask.clone(),
    };
    let report = evaluate(&norm.normalize(&pred), &norm.normalize(&gt), &mask)?;
    io::write_json(&a.out, &report)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(t) = &a.table {
        io::write_atomic(t, markdown_table(&[(a.label.clone(), &report)]).as_bytes())?;
        outputs.push(t.clone());
    }
    Ok(Outcome {
        config: serde_json::json!({ "normalization": to_json(&norm), "label": a.label }),
        seeds: BTreeMap::new(),
        inputs,
        outputs,
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_ablate(a: &AblateArgs) -> Result<Outcome> {
    let mut sets = a.cfg.sets.clone();
    if let Some(ms) = &a.modes {
        let ms: Result<Vec<String>> = ms.iter().map(|m| Ok(format!("\"{}\"", m.parse::<Mode>()?))).collect();
        sets.push(format!("modes=[{}]", ms?.join(",")));
    }
    if let Some(s) = &a.seeds {
        sets.push(format!("seeds={s:?}"));
    }
    if let Some(e) = a.epochs {
        sets.push(format!("train.epochs={e}"));
    }
    let cfg: AblationConfig = config::load(a.cfg.config.as_deref(), &sets)?;
    cfg.validate()?;
    let out = run_ablation(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let report_path = a.out.join("report.json");
    let table_path = a.out.join("table.md");
    io::write_json(&report_path, &out.report)?;
    io::write_atomic(&table_path, out.table.as_bytes())?;
    let mut outputs = vec![report_path, table_path];
    for (mode, hist) in &out.histories {
        let p = a.out.join(format!("history_{}.jsonl", mode.letter()));
        io::write_atomic(&p, hist.as_bytes())?;
        outputs.push(p);
    }
    let failure = out.report.failed.then(|| {
        let msgs: Vec<String> = out
            .report
            .summary
            .iter()
            .filter_map(|s| s.failure.as_ref().map(|f| format!("mode {}: {f}", s.mode.letter())))
            .collect();
        Error::NonFinite(format!("ablation incomplete; {}", msgs.join("; ")))
    });
    let mut seeds: BTreeMap<String, u64> = cfg.seeds.iter().enumerate().map(|(i, s)| (format!("run{i}"), *s)).collect();
    seeds.insert("phantom".into(), cfg.data.phantom_seed);
    seeds.insert("scheme".into(), cfg.data.scheme_seed);
    seeds.insert("split".into(), cfg.data.split.seed);
    Ok(Outcome {
        config: to_json(&cfg),
        seeds,
        inputs: a.cfg.config.iter().cloned().collect(),
        outputs,
        manifest: a.out.join("manifest.json"),
        failure,
    })
}

fn cmd_render(a: &RenderArgs) -> Result<Outcome> {
    let axis: Axis = a.axis.parse()?;
    let raw = io::read_raw_volume(&a.input)?;
    let channel = match a.channel.parse::<usize>() {
        Ok(c) => c,
        Err(_) => raw
            .labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(&a.channel))
            .ok_or_else(|| Error::InvalidArgument(format!("no channel labelled '{}' (labels: {:?})", a.channel, raw.labels)))?,
    };
    if channel >= raw.channels {
        return Err(Error::IndexOutOfRange {
            index: channel,
            len: raw.channels,
        });
    }
    let nv = raw.dims.n_voxels();
    let values = &raw.data[channel * nv..(channel + 1) * nv];
    let range = a.range.unwrap_or_else(|| default_range(values, &raw.mask));
    let img = render_slice(values, raw.dims, axis, a.slice, range)?;
    let mut inputs = volume_files(&a.input);
    let residual = match (&a.reference, &a.residual_out) {
        (Some(r), Some(_)) => {
            inputs.extend(volume_files(r));
            let rv = io::read_raw_volume(r)?;
            if rv.dims != raw.dims || rv.channels != raw.channels {
                return Err(Error::DimensionMismatch {
                    left_name: "volume",
                    left: vec![raw.dims.w, raw.dims.h, raw.dims.s, raw.channels],
                    right_name: "reference",
                    right: vec![rv.dims.w, rv.dims.h, rv.dims.s, rv.channels],
                });
            }
            Some(render_residual(values, &rv.data[channel * nv..(channel + 1) * nv], raw.dims, axis, a.slice, range)?)
        }
        _ => None,
    };
    io::write_atomic(&a.out, &img.to_pgm())?;
    let mut outputs = vec![a.out.clone()];
    if let (Some(res), Some(p)) = (residual, &a.residual_out) {
        io::write_atomic(p, &res.to_pgm())?;
        outputs.push(p.clone());
    }
    Ok(Outcome {
        config: serde_json::json!({ "channel": channel, "axis": a.axis, "slice": a.slice, "range": range }),
        seeds: BTreeMap::new(),
        inputs,
        outputs,
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn fail(e: &Error) -> ExitCode {
    let code = exit_code(e);
    eprintln!("ERROR[{code}]: {}", e.to_string().replace('\n', " "));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
                    if e.kind() != ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand =>
                {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprintln!("ERROR[1]: {}", e.kind());
                    let _ = e.print();
                    ExitCode::from(1)
                }
            };
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return fail(&Error::InvalidArgument("--threads must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return fail(&Error::InvalidArgument(format!("thread pool: {e}")));
        }
    }
    if let Command::Verify { manifest_file } = &cli.command {
        return match manifest::verify(manifest_file) {
            Ok(bad) if bad.is_empty() => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Ok(bad) => {
                let list: Vec<String> = bad.iter().map(|p| p.display().to_string()).collect();
                fail(&Error::InvalidArgument(format!("hash mismatch: {}", list.join(", "))))
            }
            Err(e) => fail(&e),
        };
    }
    let start = Instant::now();
    let (name, result) = match &cli.command {
        Command::Phantom(a) => ("phantom", cmd_phantom(a)),
        Command::Noise(a) => ("noise", cmd_noise(a)),
        Command::Subsample(a) => ("subsample", cmd_subsample(a)),
        Command::Fit(a) => ("fit", cmd_fit(a)),
        Command::Train(a) => ("train", cmd_train(a)),
        Command::Infer(a) => ("infer", cmd_infer(a)),
        Command::Eval(a) => ("eval", cmd_eval(a)),
        Command::Ablate(a) => ("ablate", cmd_ablate(a)),
        Command::Render(a) => ("render", cmd_render(a)),
        Command::Verify { .. } => unreachable!("handled above"),
    };
    let out = match result {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let manifest = (|| -> Result<()> {
        let m = RunManifest {
            command: name.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: out.config,
            seeds: out.seeds,
            threads: rayon::current_num_threads(),
            inputs: hash_all(&out.inputs)?,
            outputs: hash_all(&out.outputs)?,
            duration_secs: start.elapsed().as_secs_f64(),
        };
        m.write(cli.manifest.as_deref().unwrap_or(&out.manifest))
    })();
    if let Err(e) = manifest {
        return fail(&e);
    }
    match out.failure {
        Some(e) => fail(&e),
        None => ExitCode::SUCCESS,
    }
}
