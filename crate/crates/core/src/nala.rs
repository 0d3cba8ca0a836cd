//! Nesterov-style adaptation of the regularization weight λ.
//!
//! The network parameters are trained on the training set at fixed λ; λ is
//! then moved on the validation set. Because the loss is linear in λ, its
//! partial derivative at fixed θ is simply the regularizer value R(θ), so the
//! outer update only needs the current and previous validation R:
//!
//! ```text
//! m_{t+1} = β·m_t + R_{t+1} + β·(R_{t+1} − R_t)
//! λ_{t+1} = clamp(λ_t − κ·m_{t+1}, [λ_min, λ_max])
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svdreg::LossBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NalaParams {
    pub lambda0: f64,
    pub beta: f64,
    pub kappa: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for NalaParams {
    fn default() -> Self {
        NalaParams {
            lambda0: 0.1,
            beta: 0.9,
            kappa: 1e-3,
            lambda_min: 0.0,
            lambda_max: 10.0,
        }
    }
}

impl NalaParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.lambda_min <= self.lambda_max) || !(self.lambda_min..=self.lambda_max).contains(&self.lambda0) {
            return Err(Error::InvalidArgument(format!(
                "lambda0 {} must lie within [{}, {}]",
                self.lambda0, self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NalaState {
    pub lambda: f64,
    pub momentum: f64,
    pub prev_reg_value: f64,
    pub beta: f64,
    pub kappa: f64,
    pub bounds: (f64, f64),
    pub step: usize,
}

impl NalaState {
    /// Zero momentum; `initial_reg` is R(θ₀).
    pub fn new(params: &NalaParams, initial_reg: f64) -> Result<Self> {
        params.validate()?;
        Ok(NalaState {
            lambda: params.lambda0,
            momentum: 0.0,
            prev_reg_value: initial_reg,
            beta: params.beta,
            kappa: params.kappa,
            bounds: (params.lambda_min, params.lambda_max),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStepRecord {
    pub step: usize,
    pub reg_value: f64,
    pub reg_delta: f64,
    pub momentum: f64,
    pub lambda_before: f64,
    pub lambda_after: f64,
    pub clamped: bool,
    pub val_data_term: Option<f64>,
    pub val_total: Option<f64>,
}

/// ∂Loss/∂λ at fixed θ.
pub fn hyper_gradient(reg_value: f64) -> Result<f64> {
    if !reg_value.is_finite() {
        return Err(Error::NonFinite("regularizer value".into()));
    }
    Ok(reg_value)
}

/// One outer update. The input state is left untouched on error.
pub fn nala_update(state: &NalaState, reg_value_new: f64) -> Result<(NalaState, OuterStepRecord)> {
    let grad = hyper_gradient(reg_value_new)?;
    let delta = reg_value_new - state.prev_reg_value;
    let momentum = state.beta * state.momentum + grad + state.beta * delta;
    let raw = state.lambda - state.kappa * momentum;
    let (lo, hi) = state.bounds;
    let lambda = raw.clamp(lo, hi);
    let next = NalaState {
        lambda,
        momentum,
        prev_reg_value: reg_value_new,
        step: state.step + 1,
        ..*state
    };
    let record = OuterStepRecord {
        step: state.step,
        reg_value: reg_value_new,
        reg_delta: delta,
        momentum,
        lambda_before: state.lambda,
        lambda_after: lambda,
        clamped: lambda != raw,
        val_data_term: None,
        val_total: None,
    };
    Ok((next, record))
}

/// What the outer loop needs from the inner trainer.
pub trait InnerProblem {
    /// Runs the inner optimization on the training set at fixed λ and returns
    /// the mean training loss.
    fn train_epoch(&mut self, lambda: f64) -> Result<LossBreakdown>;
    /// Evaluates the current θ on the validation set.
    fn validation_loss(&mut self, lambda: f64) -> Result<LossBreakdown>;
    fn validation_size(&self) -> usize;
    /// Called whenever the current θ has the lowest validation loss so far.
    fn keep_best(&mut self, step: usize, lambda: f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub record: OuterStepRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NalaHistory {
    pub initial_val: Option<LossBreakdown>,
    pub steps: Vec<OuterStep>,
    pub final_state: NalaState,
    pub best_step: Option<usize>,
    pub best_lambda: f64,
    pub best_val_total: Option<f64>,
}

/// Alternates inner training epochs with outer λ updates for
/// `outer_budget` steps. R(θ₀) is measured on the validation set before the
/// first epoch.
pub fn alternate<P: InnerProblem>(problem: &mut P, params: &NalaParams, outer_budget: usize) -> Result<NalaHistory> {
    params.validate()?;
    if problem.validation_size() == 0 {
        return Err(Error::Empty("validation set"));
    }
    let mut state = NalaState::new(params, 0.0)?;
    if outer_budget == 0 {
        return Ok(NalaHistory {
            initial_val: None,
            steps: Vec::new(),
            final_state: state,
            best_step: None,
            best_lambda: state.lambda,
            best_val_total: None,
        });
    }
    let initial = problem.validation_loss(state.lambda)?;
    state.prev_reg_value = initial.reg_term;
    let mut steps = Vec::with_capacity(outer_budget);
    let mut best: Option<(usize, f64, f64)> = None;
    for t in 0..outer_budget {
        let lambda_t = state.lambda;
        let train = problem.train_epoch(lambda_t)?;
        let val = problem.validation_loss(lambda_t)?;
        if !val.total.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at outer step {t}")));
        }
        if best.is_none_or(|b| val.total < b.2) {
            best = Some((t, lambda_t, val.total));
            problem.keep_best(t, lambda_t);
        }
        let (next, mut record) = nala_update(&state, val.reg_term)?;
        record.val_data_term = Some(val.data_term);
        record.val_total = Some(val.total);
        steps.push(OuterStep { train, val, record });
        state = next;
    }
    let (best_step, best_lambda, best_total) = best.expect("budget > 0");
    Ok(NalaHistory {
        initial_val: Some(initial),
        steps,
        final_state: state,
        best_step: Some(best_step),
        best_lambda,
        best_val_total: Some(best_total),
    })
}
