//! Side-by-side training of the plain, fixed-λ and adaptive-λ variants on a
//! shared synthetic benchmark.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::EvalReport;
use crate::trainer::{build_dataset, infer_with, train, DataConfig, EpochRecord, Mode, PreparedData, Seeds, Split, TrainConfig, TrainOutcome, TrainStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub data: DataConfig,
    /// Shared training settings; `mode` and `seeds` are set per run.
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    /// Run seeds; each drives network init, shuffling and noise.
    pub seeds: Vec<u64>,
    /// Candidates for mode B, picked by the pooled MSE of the inferred maps on
    /// the validation blocks. When empty, `train.fixed_lambda` is used.
    pub lambda_grid: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            data: DataConfig::default(),
            train: TrainConfig {
                hidden: vec![128, 128],
                epochs: 150,
                ..TrainConfig::default()
            },
            modes: Mode::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            lambda_grid: vec![0.05, 0.2, 1.0],
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidArgument("no modes requested".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("no seeds given".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(m) {
                return Err(Error::InvalidArgument(format!("mode {} listed twice", m.letter())));
            }
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!("lambda_grid entries must be >= 0, got {l}")));
        }
        for &mode in &self.modes {
            for cfg in self.candidate_configs(mode, Seeds::default()) {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    fn candidate_configs(&self, mode: Mode, seeds: Seeds) -> Vec<TrainConfig> {
        let base = TrainConfig {
            mode,
            seeds,
            ..self.train.clone()
        };
        if mode == Mode::SvdRegFixed && !self.lambda_grid.is_empty() {
            self.lambda_grid
                .iter()
                .map(|&l| TrainConfig {
                    fixed_lambda: Some(l),
                    ..base.clone()
                })
                .collect()
        } else {
            vec![base]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambda: f64,
    pub val_data_term: Option<f64>,
    pub val_map_mse: Option<f64>,
    pub status: TrainStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub selected_lambda: Option<f64>,
    pub selected_epoch: Option<usize>,
    /// Mode B tuning candidates.
    pub candidates: Vec<Candidate>,
    pub test: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub svd_reg: bool,
    pub nala: bool,
    pub runs: usize,
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub test_voxels: usize,
    pub summary: Vec<ModeSummary>,
    pub runs: Vec<RunResult>,
    pub failed: bool,
}

impl AblationReport {
    pub fn summary_for(&self, mode: Mode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }
}

#[derive(Debug, Clone, Serialize)]
struct HistoryLine<'a> {
    seed: u64,
    candidate_lambda: Option<f64>,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub report: AblationReport,
    /// JSON-lines history per mode, in `config.modes` order.
    pub histories: Vec<(Mode, String)>,
    pub table: String,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let finite = |x: f64| x.is_finite().then_some(x);
    (finite(mean), finite(var.sqrt()))
}

fn run_mode(cfg: &AblationConfig, data: &PreparedData, mode: Mode, seed: u64, history: &mut String) -> RunResult {
    let mut result = RunResult {
        mode,
        seed,
        selected_lambda: None,
        selected_epoch: None,
        candidates: Vec::new(),
        test: None,
        error: None,
    };
    let mut best: Option<(f64, TrainOutcome, TrainConfig)> = None;
    let configs = cfg.candidate_configs(mode, Seeds::from_run(seed));
    let tuning = configs.len() > 1;
    for tc in configs {
        let outcome = match train(&tc, &data.train, &data.val) {
            Ok(o) => o,
            Err(e) => {
                result.error = Some(e.to_string());
                return result;
            }
        };
        let candidate_lambda = tuning.then(|| tc.initial_lambda());
        for r in &outcome.history {
            let line = HistoryLine { seed, candidate_lambda, record: r };
            history.push_str(&serde_json::to_string(&line).expect("history lines serialize"));
            history.push('\n');
        }
        if let TrainStatus::Diverged { epoch } = outcome.status {
            result.error = Some(format!("training diverged at epoch {epoch} (lambda {})", tc.initial_lambda()));
            return result;
        }
        let val_map_mse = if tuning {
            match infer_with(&outcome.params, tc.patch_size, &tc.normalization, &data.input).and_then(|p| data.evaluate(&p, Split::Val)) {
                Ok(r) => Some(r.all.mse),
                Err(e) => {
                    result.error = Some(e.to_string());
                    return result;
                }
            }
        } else {
            None
        };
        result.candidates.push(Candidate {
            lambda: tc.initial_lambda(),
            val_data_term: outcome.selected_val().map(|v| v.data_term),
            val_map_mse,
            status: outcome.status,
        });
        let score = val_map_mse.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, outcome, tc));
        }
    }
    if !tuning {
        result.candidates.clear();
    }
    let (_, outcome, tc) = best.expect("at least one candidate");
    result.selected_lambda = Some(outcome.selected_lambda);
    result.selected_epoch = Some(outcome.selected_epoch);
    match infer_with(&outcome.params, tc.patch_size, &tc.normalization, &data.input).and_then(|pred| data.evaluate(&pred, Split::Test)) {
        Ok(report) => result.test = Some(report),
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// Trains every requested mode for every seed on the same data and scores
/// the test slabs. A failing mode is annotated in the report rather than
/// aborting the others.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationOutput> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut histories: Vec<(Mode, String)> = cfg.modes.iter().map(|&m| (m, String::new())).collect();
    let mut test_voxels = 0;
    for &seed in &cfg.seeds {
        let tc = &cfg.train;
        let data = build_dataset(&cfg.data, Seeds::from_run(seed).noise, tc.patch_size, tc.stride, tc.normalization)?;
        if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split left {} train, {} validation and {} test patches; every split needs at least one",
                data.train.len(),
                data.val.len(),
                data.test.len()
            )));
        }
        test_voxels = data.split_mask(Split::Test).iter().filter(|&&m| m).count();
        for (mode, history) in histories.iter_mut() {
            runs.push(run_mode(cfg, &data, *mode, seed, history));
        }
    }
    let summary: Vec<ModeSummary> = cfg
        .modes
        .iter()
        .map(|&mode| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
            let failure = mine.iter().find_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)));
            let reports: Vec<&EvalReport> = mine.iter().filter_map(|r| r.test.as_ref()).collect();
            let (mse_mean, mse_std) = mean_std(&reports.iter().map(|r| r.all.mse).collect::<Vec<_>>());
            let (ssim_mean, ssim_std) = mean_std(&reports.iter().map(|r| r.all.ssim).collect::<Vec<_>>());
            let (psnr_mean, psnr_std) = mean_std(&reports.iter().map(|r| r.all.psnr.unwrap_or(f64::INFINITY)).collect::<Vec<_>>());
            ModeSummary {
                mode,
                svd_reg: mode.uses_svd_reg(),
                nala: mode.uses_nala(),
                runs: reports.len(),
                mse_mean,
                mse_std,
                ssim_mean,
                ssim_std,
                psnr_mean,
                psnr_std,
                failure,
            }
        })
        .collect();
    let failed = summary.iter().any(|s| s.failure.is_some());
    let report = AblationReport {
        config: cfg.clone(),
        test_voxels,
        summary,
        runs,
        failed,
    };
    let table = markdown_table(&report);
    Ok(AblationOutput { report, histories, table })
}

fn cell(mean: Option<f64>, std: Option<f64>, scale: f64, digits: usize) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.*} ± {:.*}", digits, m * scale, digits, s * scale),
        (Some(m), None) => format!("{:.*}", digits, m * scale),
        _ => "n/a".into(),
    }
}

/// Columns: variant, SVD-Reg, NALA, MSE (×10⁻³), SSIM, PSNR; mean ± std
/// over seeds of the pooled test scores.
pub fn markdown_table(report: &AblationReport) -> String {
    let mark = |b: bool| if b { "✓" } else { "" };
    let mut s = String::from("| Variant | SVD-Reg | NALA | MSE (x1e-3) | SSIM | PSNR |\n|---|:-:|:-:|---:|---:|---:|\n");
    for m in &report.summary {
        s.push_str(&format!(
            "| ({}) | {} | {} | {} | {} | {} |\n",
            m.mode.letter(),
            mark(m.svd_reg),
            mark(m.nala),
            cell(m.mse_mean, m.mse_std, 1e3, 3),
            cell(m.ssim_mean, m.ssim_std, 1.0, 4),
            cell(m.psnr_mean, m.psnr_std, 1.0, 3),
        ));
    }
    let failures: Vec<String> = report
        .summary
        .iter()
        .filter_map(|m| m.failure.as_ref().map(|f| format!("- ({}) failed: {f}", m.mode.letter())))
        .collect();
    if !failures.is_empty() {
        s.push('\n');
        s.push_str(&failures.join("\n"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::SplitSpec;

    fn tiny() -> AblationConfig {
        AblationConfig {
            data: DataConfig {
                dims: [12, 12, 12],
                full_directions: 30,
                split: SplitSpec {
                    fractions: [0.5, 0.25, 0.25],
                    block_size: 3,
                    seed: 1,
                },
                ..DataConfig::default()
            },
            train: TrainConfig {
                hidden: vec![16],
                epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            },
            modes: vec![Mode::Plain],
            seeds: vec![1],
            lambda_grid: vec![],
        }
    }

    #[test]
    fn single_mode_gives_single_row() {
        let out = run_ablation(&tiny()).unwrap();
        assert_eq!(out.table.lines().count(), 3);
        assert!(out.table.contains("| (A) |  |  |"));
        assert!(!out.report.failed);
        assert_eq!(out.histories.len(), 1);
        assert_eq!(out.histories[0].1.lines().count(), 3);
    }

    #[test]
    fn b_at_zero_matches_a() {
        let mut cfg = tiny();
        cfg.modes = vec![Mode::Plain, Mode::SvdRegFixed];
        cfg.lambda_grid = vec![0.0];
        let out = run_ablation(&cfg).unwrap();
        let a = out.report.summary_for(Mode::Plain).unwrap();
        let b = out.report.summary_for(Mode::SvdRegFixed).unwrap();
        assert_eq!(a.mse_mean, b.mse_mean);
        assert_eq!(a.ssim_mean, b.ssim_mean);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = tiny();
        cfg.modes = vec![];
        assert!(run_ablation(&cfg).is_err());
        let mut cfg = tiny();
        cfg.modes = vec![Mode::SvdRegFixed];
        assert!(run_ablation(&cfg).is_err());
        let mut cfg = tiny();
        cfg.lambda_grid = vec![-1.0];
        assert!(run_ablation(&cfg).is_err());
    }

    #[test]
    fn divergence_is_annotated() {
        let mut cfg = tiny();
        cfg.train.learning_rate = 1e300;
        let out = run_ablation(&cfg).unwrap();
        assert!(out.report.failed);
        assert!(out.table.contains("failed"), "{}", out.table);
    }
}
