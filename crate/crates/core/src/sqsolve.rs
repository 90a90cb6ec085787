//! Square nonlinear block solver: Newton with LU, dogleg trust-region
//! fallback, and BLT-ordered decomposition.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::expr::{EvalError, Tape, TapeWorkspace, VarId};
use crate::incidence::{block_triangularize, BltPartition, IncidenceError};
use crate::model::{Constraint, SquareSubsystem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockSolveOptions {
    /// Converged when the residual infinity norm is at or below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial trust radius, relative to the scaled norm of the guess.
    pub initial_radius: f64,
    /// Stall threshold on the trust radius, relative to the scaled guess norm.
    pub min_step: f64,
    /// Disables the fraction-to-boundary clip; out-of-domain trial points
    /// then abort the solve with an evaluation error.
    pub no_clip: bool,
}

impl Default for BlockSolveOptions {
    fn default() -> Self {
        BlockSolveOptions { tolerance: 1e-10, max_iterations: 50, initial_radius: 100.0, min_step: 1e-14, no_clip: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockStatus {
    Converged,
    IterLimit,
    SingularJacobian,
    EvalError,
}

impl BlockStatus {
    fn severity(self) -> u8 {
        match self {
            BlockStatus::Converged => 0,
            BlockStatus::IterLimit => 1,
            BlockStatus::SingularJacobian => 2,
            BlockStatus::EvalError => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub size: usize,
    pub status: BlockStatus,
    pub iterations: usize,
    pub residual: f64,
}

/// Where a solve went wrong.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFailure {
    pub block: usize,
    /// Equation that raised the evaluation error, or carries the largest
    /// residual when the solve did not converge.
    pub equation: String,
    #[serde(skip)]
    pub error: Option<EvalError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSolveReport {
    pub status: BlockStatus,
    pub iterations: usize,
    pub residual: f64,
    pub blocks: Vec<BlockSummary>,
    pub failure: Option<BlockFailure>,
}

impl BlockSolveReport {
    pub fn converged(&self) -> bool {
        self.status == BlockStatus::Converged
    }
}

impl std::fmt::Display for BlockSolveReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} after {} iterations (residual {:.3e})", self.status, self.iterations, self.residual)?;
        if let Some(fail) = &self.failure {
            write!(f, " in block {} at `{}`", fail.block, fail.equation)?;
            if let Some(e) = &fail.error {
                write!(f, ": {e}")?;
            }
        }
        Ok(())
    }
}

/// Compiled equations of one block.
#[derive(Clone, Debug)]
struct BlockSystem {
    tapes: Vec<Tape>,
    names: Vec<String>,
    outputs: Vec<VarId>,
    col_of: HashMap<VarId, usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

struct EvalFailure {
    row: usize,
    error: EvalError,
}

impl BlockSystem {
    fn new(equations: &[&Constraint], outputs: &[VarId], lower: &[f64], upper: &[f64]) -> Self {
        BlockSystem {
            tapes: equations.iter().map(|c| c.residual.compile()).collect(),
            names: equations.iter().map(|c| c.name.clone()).collect(),
            outputs: outputs.to_vec(),
            col_of: outputs.iter().enumerate().map(|(i, &v)| (v, i)).collect(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        }
    }

    fn len(&self) -> usize {
        self.outputs.len()
    }

    fn residual(&self, point: &[f64], ws: &mut TapeWorkspace) -> Result<DVector<f64>, EvalFailure> {
        let mut f = DVector::zeros(self.len());
        for (row, t) in self.tapes.iter().enumerate() {
            f[row] = t.eval_with(point, ws).map_err(|error| EvalFailure { row, error })?;
        }
        Ok(f)
    }

    fn jacobian(
        &self,
        point: &[f64],
        ws: &mut TapeWorkspace,
        grad: &mut Vec<(VarId, f64)>,
    ) -> Result<DMatrix<f64>, EvalFailure> {
        let n = self.len();
        let mut j = DMatrix::zeros(n, n);
        for (row, t) in self.tapes.iter().enumerate() {
            t.gradient_with(point, ws, grad).map_err(|error| EvalFailure { row, error })?;
            for &(v, d) in grad.iter() {
                if let Some(&col) = self.col_of.get(&v) {
                    j[(row, col)] = d;
                }
            }
        }
        Ok(j)
    }

    fn read(&self, point: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.outputs.iter().map(|v| point[v.0]))
    }

    fn write(&self, point: &mut [f64], x: &DVector<f64>) {
        for (i, v) in self.outputs.iter().enumerate() {
            point[v.0] = x[i];
        }
    }

    /// Per-component fraction-to-boundary: each unknown keeps at least 1% of
    /// its current distance to a finite bound.
    fn clip(&self, x: &DVector<f64>, trial: &mut DVector<f64>) {
        for i in 0..self.len() {
            let (l, u) = (self.lower[i], self.upper[i]);
            if l.is_finite() && x[i] > l {
                trial[i] = trial[i].max(l + 0.01 * (x[i] - l));
            }
            if u.is_finite() && x[i] < u {
                trial[i] = trial[i].min(u - 0.01 * (u - x[i]));
            }
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn argmax_abs(v: &DVector<f64>) -> usize {
    v.iter().enumerate().fold((0, -1.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) }).0
}

struct Outcome {
    status: BlockStatus,
    iterations: usize,
    residual: f64,
    /// Offending row and optional evaluation error.
    failure: Option<(usize, Option<EvalError>)>,
}

/// Solves `sys` in place on `point`.
fn solve_system(sys: &BlockSystem, point: &mut [f64], opts: &BlockSolveOptions) -> Outcome {
    let mut ws = TapeWorkspace::default();
    let mut x = sys.read(point);
    let mut f = match sys.residual(point, &mut ws) {
        Ok(f) => f,
        Err(e) => {
            return Outcome {
                status: BlockStatus::EvalError,
                iterations: 0,
                residual: f64::INFINITY,
                failure: Some((e.row, Some(e.error))),
            }
        }
    };
    if sys.len() == 1 {
        return solve_scalar(sys, point, x[0], f[0], opts, &mut ws);
    }
    let n = sys.len();
    let mut grad = Vec::new();
    let mut diag: DVector<f64> = DVector::from_element(n, 0.0);
    let mut radius = f64::NAN;
    let mut trial_pt = point.to_vec();
    let eval_fail = |e: EvalFailure, it: usize, res: f64| Outcome {
        status: BlockStatus::EvalError,
        iterations: it,
        residual: res,
        failure: Some((e.row, Some(e.error))),
    };

    for iter in 0..opts.max_iterations {
        let fnorm = inf_norm(&f);
        if fnorm <= opts.tolerance {
            let residual = polish(sys, point, &mut x, &mut f, &mut ws, &mut grad, &mut trial_pt);
            return Outcome { status: BlockStatus::Converged, iterations: iter, residual, failure: None };
        }
        let j = match sys.jacobian(point, &mut ws, &mut grad) {
            Ok(j) => j,
            Err(e) => return eval_fail(e, iter, fnorm),
        };
        for c in 0..n {
            let cn = j.column(c).norm();
            diag[c] = diag[c].max(if cn > 0.0 { cn } else { 1.0 });
        }
        if radius.is_nan() {
            let dx = x.component_mul(&diag).norm();
            radius = opts.initial_radius * if dx > 0.0 { dx } else { 1.0 };
        }
        let newton = j.clone().lu().solve(&(-&f)).filter(|p| p.iter().all(|v| v.is_finite()));
        let phi = 0.5 * f.norm_squared();

        // full Newton step with sufficient decrease on 1/2 |F|^2
        if let Some(p) = &newton {
            let mut t = &x + p;
            if !opts.no_clip {
                sys.clip(&x, &mut t);
            }
            sys.write(&mut trial_pt, &t);
            match sys.residual(&trial_pt, &mut ws) {
                Ok(ft) if 0.5 * ft.norm_squared() <= phi * (1.0 - 2e-4) => {
                    radius = radius.max(2.0 * (&t - &x).component_mul(&diag).norm());
                    x = t;
                    f = ft;
                    sys.write(point, &x);
                    continue;
                }
                Ok(_) => {}
                Err(e) if opts.no_clip => return eval_fail(e, iter + 1, fnorm),
                Err(_) => {}
            }
        }

        // dogleg in the column-scaled space
        let js = {
            let mut m = j.clone();
            for c in 0..n {
                m.column_mut(c).scale_mut(1.0 / diag[c]);
            }
            m
        };
        let gs = js.transpose() * &f;
        let jg = &js * &gs;
        let cauchy_len = if jg.norm_squared() > 0.0 { gs.norm_squared() / jg.norm_squared() } else { 0.0 };
        let pc = -&gs * cauchy_len;
        let pn = newton.as_ref().map(|p| p.component_mul(&diag));
        let mut accepted = false;
        for _ in 0..30 {
            let ps = dogleg(&pc, &gs, pn.as_ref(), radius);
            let mut t = &x + ps.component_div(&diag);
            if !opts.no_clip {
                sys.clip(&x, &mut t);
            }
            let step = &t - &x;
            let step_norm = step.component_mul(&diag).norm();
            if step_norm == 0.0 {
                break;
            }
            sys.write(&mut trial_pt, &t);
            let ft = match sys.residual(&trial_pt, &mut ws) {
                Ok(ft) => ft,
                Err(e) if opts.no_clip => return eval_fail(e, iter + 1, fnorm),
                Err(_) => {
                    radius = 0.25 * step_norm;
                    continue;
                }
            };
            let lin = &f + &j * &step;
            let pred = phi - 0.5 * lin.norm_squared();
            let act = phi - 0.5 * ft.norm_squared();
            let rho = if pred > 0.0 { act / pred } else { -1.0 };
            if rho < 0.25 {
                radius = 0.25 * step_norm;
            } else if rho > 0.75 {
                radius = radius.max(2.0 * step_norm);
            }
            if rho > 1e-4 {
                x = t;
                f = ft;
                sys.write(point, &x);
                accepted = true;
                break;
            }
            let scale = x.component_mul(&diag).norm().max(1.0);
            if radius <= opts.min_step * scale {
                break;
            }
        }
        if !accepted {
            return Outcome {
                status: BlockStatus::SingularJacobian,
                iterations: iter + 1,
                residual: fnorm,
                failure: Some((argmax_abs(&f), None)),
            };
        }
    }
    let fnorm = inf_norm(&f);
    if fnorm <= opts.tolerance {
        return Outcome { status: BlockStatus::Converged, iterations: opts.max_iterations, residual: fnorm, failure: None };
    }
    Outcome {
        status: BlockStatus::IterLimit,
        iterations: opts.max_iterations,
        residual: fnorm,
        failure: Some((argmax_abs(&f), None)),
    }
}

/// One extra Newton step from a converged iterate, kept only if it lowers
/// the residual. Drives the solution to rounding level for sensitivities.
fn polish(
    sys: &BlockSystem,
    point: &mut [f64],
    x: &mut DVector<f64>,
    f: &mut DVector<f64>,
    ws: &mut TapeWorkspace,
    grad: &mut Vec<(VarId, f64)>,
    trial_pt: &mut [f64],
) -> f64 {
    let fnorm = inf_norm(f);
    if fnorm == 0.0 {
        return fnorm;
    }
    let Ok(j) = sys.jacobian(point, ws, grad) else { return fnorm };
    let Some(p) = j.lu().solve(&(-&*f)).filter(|p| p.iter().all(|v| v.is_finite())) else { return fnorm };
    let t = &*x + p;
    sys.write(trial_pt, &t);
    match sys.residual(trial_pt, ws) {
        Ok(ft) if inf_norm(&ft) < fnorm => {
            *x = t;
            *f = ft;
            sys.write(point, x);
            inf_norm(f)
        }
        _ => fnorm,
    }
}

/// Dogleg point on the path Cauchy → Newton, truncated to `radius`.
fn dogleg(pc: &DVector<f64>, gs: &DVector<f64>, pn: Option<&DVector<f64>>, radius: f64) -> DVector<f64> {
    if let Some(pn) = pn {
        if pn.norm() <= radius {
            return pn.clone();
        }
    }
    let pcn = pc.norm();
    let Some(pn) = pn.filter(|_| pcn < radius) else {
        let gn = gs.norm();
        return if gn > 0.0 && pcn > radius { -gs * (radius / gn) } else { pc.clone() };
    };
    // solve |pc + t (pn - pc)| = radius for t in [0, 1]
    let d = pn - pc;
    let a = d.norm_squared();
    let b = 2.0 * pc.dot(&d);
    let c = pcn * pcn - radius * radius;
    let t = if a > 0.0 { (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a) } else { 0.0 };
    pc + d * t.clamp(0.0, 1.0)
}

/// Scalar Newton with a bisection safeguard once a sign change is bracketed.
fn solve_scalar(
    sys: &BlockSystem,
    point: &mut [f64],
    mut x: f64,
    mut fx: f64,
    opts: &BlockSolveOptions,
    ws: &mut TapeWorkspace,
) -> Outcome {
    let v = sys.outputs[0];
    let (lo_b, hi_b) = (sys.lower[0], sys.upper[0]);
    let mut bracket: Option<(f64, f64, f64)> = None; // (a, b, f(a)) with f(a) f(b) < 0
    let mut grad = Vec::new();
    let fail = |it: usize, res: f64, e: Option<EvalError>| Outcome {
        status: if e.is_some() { BlockStatus::EvalError } else { BlockStatus::SingularJacobian },
        iterations: it,
        residual: res,
        failure: Some((0, e)),
    };
    for iter in 0..opts.max_iterations {
        point[v.0] = x;
        if fx.abs() <= opts.tolerance {
            // one polishing Newton step, kept only if it helps
            if fx != 0.0 && sys.tapes[0].gradient_with(point, ws, &mut grad).is_ok() {
                let d = grad.iter().find(|(g, _)| *g == v).map_or(0.0, |&(_, d)| d);
                if d != 0.0 && d.is_finite() {
                    point[v.0] = x - fx / d;
                    match sys.tapes[0].eval_with(point, ws) {
                        Ok(ft) if ft.abs() < fx.abs() => fx = ft,
                        _ => point[v.0] = x,
                    }
                }
            }
            return Outcome { status: BlockStatus::Converged, iterations: iter, residual: fx.abs(), failure: None };
        }
        let d = match sys.tapes[0].gradient_with(point, ws, &mut grad) {
            Ok(_) => grad.iter().find(|(g, _)| *g == v).map_or(0.0, |&(_, d)| d),
            Err(e) => return fail(iter, fx.abs(), Some(e)),
        };
        let mut cand = if d != 0.0 && d.is_finite() { x - fx / d } else { f64::NAN };
        if let Some((a, b, _)) = bracket {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if !(cand > lo && cand < hi) {
                cand = 0.5 * (a + b);
            }
        } else if cand.is_nan() {
            return fail(iter + 1, fx.abs(), None);
        }
        if !opts.no_clip {
            if lo_b.is_finite() && x > lo_b {
                cand = cand.max(lo_b + 0.01 * (x - lo_b));
            }
            if hi_b.is_finite() && x < hi_b {
                cand = cand.min(hi_b - 0.01 * (hi_b - x));
            }
        }
        // backtrack toward x until the residual is defined and not worse,
        // unless a bracket already guarantees progress
        let mut accepted = None;
        let mut step = cand - x;
        for _ in 0..40 {
            let t = x + step;
            point[v.0] = t;
            match sys.tapes[0].eval_with(point, ws) {
                Ok(ft) if ft.abs() < fx.abs() || bracket.is_some() || ft.signum() != fx.signum() => {
                    accepted = Some((t, ft));
                    break;
                }
                Ok(_) => {}
                Err(e) if opts.no_clip => {
                    point[v.0] = x;
                    return fail(iter + 1, fx.abs(), Some(e));
                }
                Err(_) => {}
            }
            step *= 0.5;
        }
        let Some((t, ft)) = accepted else {
            point[v.0] = x;
            return fail(iter + 1, fx.abs(), None);
        };
        if ft.signum() != fx.signum() {
            bracket = Some((x, t, fx));
        } else if let Some((a, b, fa)) = bracket {
            bracket = Some(if ft.signum() == fa.signum() { (t, b, ft) } else { (a, t, fa) });
        }
        x = t;
        fx = ft;
        point[v.0] = x;
    }
    if fx.abs() <= opts.tolerance {
        return Outcome { status: BlockStatus::Converged, iterations: opts.max_iterations, residual: fx.abs(), failure: None };
    }
    Outcome { status: BlockStatus::IterLimit, iterations: opts.max_iterations, residual: fx.abs(), failure: Some((0, None)) }
}

/// Solves `equations` for `outputs` as one block; all other entries of
/// `point` are held fixed. On return `point` holds the last iterate.
pub fn solve_block(
    equations: &[Constraint],
    outputs: &[VarId],
    lower: &[f64],
    upper: &[f64],
    point: &mut [f64],
    opts: &BlockSolveOptions,
) -> BlockSolveReport {
    assert_eq!(equations.len(), outputs.len(), "block must be square");
    let refs: Vec<&Constraint> = equations.iter().collect();
    let sys = BlockSystem::new(&refs, outputs, lower, upper);
    let out = solve_system(&sys, point, opts);
    let failure = out.failure.map(|(row, error)| BlockFailure { block: 0, equation: sys.names[row].clone(), error });
    BlockSolveReport {
        status: out.status,
        iterations: out.iterations,
        residual: out.residual,
        blocks: vec![BlockSummary { size: sys.len(), status: out.status, iterations: out.iterations, residual: out.residual }],
        failure,
    }
}

/// A square subsystem compiled once and solved block by block.
#[derive(Clone, Debug)]
pub struct BltSolver {
    partition: BltPartition,
    blocks: Vec<BlockSystem>,
}

impl BltSolver {
    pub fn new(sub: &SquareSubsystem) -> Result<Self, IncidenceError> {
        let partition = block_triangularize(&sub.incidence())?;
        let blocks = partition
            .blocks
            .iter()
            .map(|b| {
                let eqs: Vec<&Constraint> = b.equations.iter().map(|&i| &sub.equations[i]).collect();
                let outs: Vec<VarId> = b.variables.iter().map(|&i| sub.outputs[i]).collect();
                let lo: Vec<f64> = b.variables.iter().map(|&i| sub.lower[i]).collect();
                let hi: Vec<f64> = b.variables.iter().map(|&i| sub.upper[i]).collect();
                BlockSystem::new(&eqs, &outs, &lo, &hi)
            })
            .collect();
        Ok(BltSolver { partition, blocks })
    }

    pub fn partition(&self) -> &BltPartition {
        &self.partition
    }

    /// Solves blocks in order; the first failing block stops the sweep.
    pub fn solve(&self, point: &mut [f64], opts: &BlockSolveOptions) -> BlockSolveReport {
        let mut report = BlockSolveReport {
            status: BlockStatus::Converged,
            iterations: 0,
            residual: 0.0,
            blocks: Vec::with_capacity(self.blocks.len()),
            failure: None,
        };
        for (k, sys) in self.blocks.iter().enumerate() {
            let out = solve_system(sys, point, opts);
            report.iterations += out.iterations;
            report.residual = report.residual.max(out.residual);
            report.blocks.push(BlockSummary {
                size: sys.len(),
                status: out.status,
                iterations: out.iterations,
                residual: out.residual,
            });
            if out.status.severity() > report.status.severity() {
                report.status = out.status;
            }
            if out.status != BlockStatus::Converged {
                report.failure = out
                    .failure
                    .map(|(row, error)| BlockFailure { block: k, equation: sys.names[row].clone(), error });
                break;
            }
        }
        report
    }
}

/// Solves a square subsystem in BLT order, substituting earlier block
/// solutions into later blocks.
pub fn solve_blt(
    sub: &SquareSubsystem,
    point: &mut [f64],
    opts: &BlockSolveOptions,
) -> Result<BlockSolveReport, IncidenceError> {
    Ok(BltSolver::new(sub)?.solve(point, opts))
}
