//! A square subsystem `R(x, y, u) = 0` exposed as the differentiable map
//! `y = R_y(x, u)`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{Tape, TapeWorkspace, VarId};
use crate::incidence::IncidenceError;
use crate::model::{extract_subsystem, Formulation, ModelError, NlpModel, SquareSubsystem, Tag};
use crate::sqsolve::{BlockSolveOptions, BlockSolveReport, BltSolver};

#[derive(Clone, Debug, Error)]
pub enum ImplicitError {
    #[error("inner solve failed: {0}")]
    Solve(Box<BlockSolveReport>),
    #[error("output Jacobian is singular at the solution")]
    SingularJacobian,
    #[error(transparent)]
    Structure(#[from] IncidenceError),
    #[error("expected {expected} input values, got {got}")]
    InputLength { expected: usize, got: usize },
}

#[derive(Clone, Debug)]
pub struct ImplicitFunction {
    sub: SquareSubsystem,
    solver: BltSolver,
    opts: BlockSolveOptions,
    tapes: Vec<Tape>,
    /// Full model point; outputs double as the warm-start guess.
    scratch: Vec<f64>,
    cache: Option<(Vec<f64>, Vec<f64>)>,
    last_iterations: usize,
}

impl ImplicitFunction {
    /// `initial` is a full model point supplying the first output guess.
    pub fn new(sub: SquareSubsystem, opts: BlockSolveOptions, initial: &[f64]) -> Result<Self, ImplicitError> {
        let solver = BltSolver::new(&sub)?;
        let tapes = sub.equations.iter().map(|c| c.residual.compile()).collect();
        Ok(ImplicitFunction {
            sub,
            solver,
            opts,
            tapes,
            scratch: initial.to_vec(),
            cache: None,
            last_iterations: 0,
        })
    }

    pub fn subsystem(&self) -> &SquareSubsystem {
        &self.sub
    }

    pub fn options(&self) -> &BlockSolveOptions {
        &self.opts
    }

    /// Inner iterations spent by the most recent [`Self::eval_outputs`].
    pub fn last_iterations(&self) -> usize {
        self.last_iterations
    }

    fn load_inputs(&mut self, inputs: &[f64]) -> Result<(), ImplicitError> {
        if inputs.len() != self.sub.inputs.len() {
            return Err(ImplicitError::InputLength { expected: self.sub.inputs.len(), got: inputs.len() });
        }
        for (v, &x) in self.sub.inputs.iter().zip(inputs) {
            self.scratch[v.0] = x;
        }
        Ok(())
    }

    /// Solves for the outputs at `inputs` (ordered as the subsystem inputs).
    /// A failed solve leaves the warm start at the last good solution.
    pub fn eval_outputs(&mut self, inputs: &[f64]) -> Result<Vec<f64>, ImplicitError> {
        if let Some((ci, co)) = &self.cache {
            if ci.as_slice() == inputs {
                self.last_iterations = 0;
                return Ok(co.clone());
            }
        }
        self.load_inputs(inputs)?;
        let report = self.solver.solve(&mut self.scratch, &self.opts);
        self.last_iterations = report.iterations;
        if !report.converged() {
            if let Some((_, co)) = &self.cache {
                for (v, &y) in self.sub.outputs.iter().zip(co) {
                    self.scratch[v.0] = y;
                }
            }
            return Err(ImplicitError::Solve(Box::new(report)));
        }
        let outputs: Vec<f64> = self.sub.outputs.iter().map(|v| self.scratch[v.0]).collect();
        self.cache = Some((inputs.to_vec(), outputs.clone()));
        Ok(outputs)
    }

    /// `dy/d(inputs) = -(dR/dy)^-1 dR/d(inputs)`, one row per output.
    pub fn jacobian_outputs(&mut self, inputs: &[f64]) -> Result<DMatrix<f64>, ImplicitError> {
        self.eval_outputs(inputs)?;
        let n = self.sub.outputs.len();
        let k = self.sub.inputs.len();
        let out_pos = |v: VarId| self.sub.outputs.iter().position(|&o| o == v);
        let in_pos = |v: VarId| self.sub.inputs.iter().position(|&o| o == v);
        let mut jy = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, k);
        let mut ws = TapeWorkspace::default();
        let mut grad = Vec::new();
        for (row, t) in self.tapes.iter().enumerate() {
            // evaluation succeeded during the solve, so this cannot fail
            t.gradient_with(&self.scratch, &mut ws, &mut grad).map_err(|_| ImplicitError::SingularJacobian)?;
            for &(v, d) in &grad {
                if let Some(c) = out_pos(v) {
                    jy[(row, c)] = d;
                } else if let Some(c) = in_pos(v) {
                    ju[(row, c)] = d;
                }
            }
        }
        let lu = jy.lu();
        let sol = lu.solve(&ju).ok_or(ImplicitError::SingularJacobian)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(ImplicitError::SingularJacobian);
        }
        Ok(-sol)
    }
}

/// Replaces the reactor block of a full-space model by an external solve.
/// Constraints that referenced reactor outputs (the linking equalities) stay
/// in the model and see the outputs through the implicit function.
pub fn reformulate(model: &NlpModel) -> Result<NlpModel, ModelError> {
    let sub = extract_subsystem(model, Tag::Reactor)?;
    let mut out = model.clone();
    out.formulation = Formulation::Implicit;
    out.externalize(sub);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::model::{Constraint, Variable};

    fn v(i: usize) -> Expr {
        Expr::var(VarId(i))
    }

    #[test]
    fn scalar_sensitivity() {
        // y - u^2 = 0
        let sub = SquareSubsystem::new(
            vec![Constraint::equality("r", v(0) - v(1) * v(1), Tag::Reactor)],
            vec![VarId(0)],
            |x| x.to_string(),
        )
        .unwrap();
        let mut f = ImplicitFunction::new(sub, Default::default(), &[0.0, 0.0]).unwrap();
        let y = f.eval_outputs(&[1.5]).unwrap();
        assert!((y[0] - 2.25).abs() < 1e-12);
        let j = f.jacobian_outputs(&[1.5]).unwrap();
        assert!((j[(0, 0)] - 3.0).abs() < 1e-12);
        // cache hit
        f.eval_outputs(&[1.5]).unwrap();
        assert_eq!(f.last_iterations(), 0);
    }

    #[test]
    fn linear_sensitivity_is_exact() {
        // A y + B u = b with A = [[2,1],[1,3]], B = [[1],[-1]]
        let eqs = vec![
            Constraint::equality("r0", v(0) * 2.0 + v(1) + v(2) - 1.0, Tag::Reactor),
            Constraint::equality("r1", v(0) + v(1) * 3.0 - v(2) - 2.0, Tag::Reactor),
        ];
        let sub = SquareSubsystem::new(eqs, vec![VarId(0), VarId(1)], |x| x.to_string()).unwrap();
        let mut f = ImplicitFunction::new(sub, Default::default(), &[0.0; 3]).unwrap();
        let j = f.jacobian_outputs(&[0.7]).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let expect = -(a.try_inverse().unwrap() * b);
        assert!((j - expect).abs().max() < 1e-12);
    }

    #[test]
    fn reformulation_hides_block() {
        let mut m = NlpModel::new(Formulation::FullSpace);
        let u = m.add_var(Variable::new("u", 1.0));
        let y = m.add_var(Variable::new("y", 1.0).owned_by(Tag::Reactor));
        let z = m.add_var(Variable::new("z", 1.0));
        m.add_constraint(Constraint::equality("r", Expr::var(y) - Expr::var(u).exp(), Tag::Reactor));
        m.add_constraint(Constraint::equality("link", Expr::var(z) - Expr::var(y), Tag::Linking));
        m.set_objective(Expr::var(z));
        let full = m.statistics();
        let imp = reformulate(&m).unwrap();
        let s = imp.statistics();
        assert_eq!(full.variables - s.variables, 1);
        assert_eq!(full.equalities - s.equalities, 1);
        assert_eq!(imp.constraints_with_tag(Tag::Reactor).count(), 0);
        assert!(reformulate(&imp).is_err());
    }
}
