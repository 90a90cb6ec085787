//! Primal-dual interior-point NLP solver shared by every formulation.

mod ipm;
mod problem;

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use problem::{ModelProblem, ProblemError};

use crate::model::NlpModel;
use crate::sqsolve::BlockSolveOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial_mu: f64,
    /// Linear barrier reduction factor.
    pub mu_factor: f64,
    /// Lower limit of the fraction-to-boundary parameter.
    pub tau_min: f64,
    /// Report an evaluation error on the first failed evaluation instead of
    /// backtracking.
    pub fail_hard: bool,
    /// Options for the inner square solves of the implicit formulation.
    pub inner: BlockSolveOptions,
    /// Emit per-iteration log lines at debug level.
    pub log_iterations: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-7,
            max_iterations: 300,
            initial_mu: 0.1,
            mu_factor: 0.2,
            tau_min: 0.99,
            fail_hard: false,
            inner: BlockSolveOptions::default(),
            log_iterations: false,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum OptionsError {
    #[error("tolerance must be positive")]
    Tolerance,
    #[error("max_iterations must be at least 1")]
    MaxIterations,
    #[error("tau_min must lie in (0, 1)")]
    Tau,
    #[error("barrier parameters must satisfy mu > 0 and 0 < factor < 1")]
    Barrier,
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), OptionsError> {
        if !(self.tolerance > 0.0) {
            return Err(OptionsError::Tolerance);
        }
        if self.max_iterations < 1 {
            return Err(OptionsError::MaxIterations);
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return Err(OptionsError::Tau);
        }
        if !(self.initial_mu > 0.0 && self.mu_factor > 0.0 && self.mu_factor < 1.0) {
            return Err(OptionsError::Barrier);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    IterationLimit,
    ConvergedInfeasible,
    EvalError,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Optimal, Status::IterationLimit, Status::ConvergedInfeasible, Status::EvalError];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Optimal => "Optimal",
            Status::IterationLimit => "IterationLimit",
            Status::ConvergedInfeasible => "ConvergedInfeasible",
            Status::EvalError => "EvalError",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Status::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Infinity norms of the three KKT residual groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// Multipliers in model terms: one per model constraint (in model order,
/// nonnegative for inequalities at a KKT point) and one lower/upper bound
/// multiplier per solver variable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub constraints: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub objective: f64,
    pub inf_pr: f64,
    pub inf_du: f64,
    pub mu: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: Status,
    pub iterations: usize,
    pub wall_time: Duration,
    /// Maximized objective at the returned point.
    pub objective: f64,
    /// Full model point (every registered variable, model units).
    pub point: Vec<f64>,
    pub multipliers: Multipliers,
    pub kkt: KktResiduals,
    pub trace: Vec<IterationLog>,
    /// Description of the evaluation failure behind an `EvalError` status.
    pub failure: Option<String>,
}

/// Solves `model` from its current variable values.
pub fn solve(model: &NlpModel, opts: &SolveOptions) -> SolveResult {
    ipm::solve(model, opts)
}

/// Recomputes the KKT residuals of `model` at `point` from scratch.
///
/// Stationarity is measured in the solver's scaled coordinates for the
/// minimization of the negated objective. Empty multiplier vectors stand
/// for zeros.
pub fn kkt_residual(
    model: &NlpModel,
    point: &[f64],
    multipliers: &Multipliers,
    inner: &BlockSolveOptions,
) -> Result<KktResiduals, ProblemError> {
    let mut p = ModelProblem::new(model, inner.clone(), point)?;
    let x = p.scaled_point(point);
    let (f, c) = p.eval_values(&x)?;
    let _ = f;
    let (g, j) = p.eval_derivatives(&x)?;
    let (lo, hi) = p.bounds();
    let sized = |v: &[f64], n: usize, what: &'static str| -> Result<Vec<f64>, ProblemError> {
        match v.len() {
            0 => Ok(vec![0.0; n]),
            m if m == n => Ok(v.to_vec()),
            got => Err(ProblemError::Dimension { what, expected: n, got }),
        }
    };
    let lambda = sized(&multipliers.constraints, c.len(), "constraint multipliers")?;
    let zl = sized(&multipliers.lower, x.len(), "lower-bound multipliers")?;
    let zu = sized(&multipliers.upper, x.len(), "upper-bound multipliers")?;
    Ok(kkt_parts(&KktInput {
        grad: &g,
        cons: &c,
        jac: &j,
        ineq: p.inequality_mask(),
        lambda: &lambda,
        zl: &zl,
        zu: &zu,
        x: &x,
        lower: &lo,
        upper: &hi,
    }))
}

pub(crate) struct KktInput<'a> {
    /// Gradient of the maximized objective.
    pub grad: &'a DVector<f64>,
    pub cons: &'a DVector<f64>,
    pub jac: &'a DMatrix<f64>,
    pub ineq: &'a [bool],
    pub lambda: &'a [f64],
    pub zl: &'a [f64],
    pub zu: &'a [f64],
    pub x: &'a DVector<f64>,
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

/// KKT residuals of `min -f s.t. c_E = 0, c_I <= 0, l <= x <= u`.
pub(crate) fn kkt_parts(k: &KktInput<'_>) -> KktResiduals {
    let n = k.x.len();
    let lam = DVector::from_column_slice(k.lambda);
    let jtl = k.jac.tr_mul(&lam);
    let mut stat = 0.0_f64;
    let mut comp = 0.0_f64;
    for i in 0..n {
        let r = -k.grad[i] + jtl[i] - k.zl[i] + k.zu[i];
        stat = stat.max(r.abs());
        if k.lower[i].is_finite() {
            comp = comp.max((k.zl[i] * (k.x[i] - k.lower[i])).abs());
            stat = stat.max((-k.zl[i]).max(0.0));
        }
        if k.upper[i].is_finite() {
            comp = comp.max((k.zu[i] * (k.upper[i] - k.x[i])).abs());
            stat = stat.max((-k.zu[i]).max(0.0));
        }
    }
    let mut feas = 0.0_f64;
    for (r, &c) in k.cons.iter().enumerate() {
        if k.ineq[r] {
            feas = feas.max(c.max(0.0));
            comp = comp.max((k.lambda[r] * c).abs());
            stat = stat.max((-k.lambda[r]).max(0.0));
        } else {
            feas = feas.max(c.abs());
        }
    }
    KktResiduals { stationarity: stat, feasibility: feas, complementarity: comp }
}
