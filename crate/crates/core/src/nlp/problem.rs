use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{EvalError, Tape, TapeWorkspace, VarId};
use crate::implicit::{ImplicitError, ImplicitFunction};
use crate::model::{ConstraintKind, NlpModel};
use crate::sqsolve::{BlockSolveOptions, BlockSolveReport};

#[derive(Clone, Debug, Error)]
pub enum ProblemError {
    #[error("evaluation of `{constraint}` failed: {error}")]
    Expression { constraint: String, error: EvalError },
    #[error("inner solve failed: {0}")]
    Inner(Box<BlockSolveReport>),
    #[error("implicit output Jacobian is singular")]
    Singular,
    #[error("invalid external block: {0}")]
    Structure(String),
    #[error("expected {expected} {what}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

impl ProblemError {
    /// The expression-level error at the root of this failure, if any.
    pub fn eval_error(&self) -> Option<(&str, EvalError)> {
        match self {
            ProblemError::Expression { constraint, error } => Some((constraint, *error)),
            ProblemError::Inner(r) => r.failure.as_ref().and_then(|f| f.error.map(|e| (f.equation.as_str(), e))),
            _ => None,
        }
    }
}

impl From<ImplicitError> for ProblemError {
    fn from(e: ImplicitError) -> Self {
        match e {
            ImplicitError::Solve(r) => ProblemError::Inner(r),
            ImplicitError::SingularJacobian => ProblemError::Singular,
            other => ProblemError::Structure(other.to_string()),
        }
    }
}

#[derive(Clone, Debug)]
struct External {
    f: ImplicitFunction,
    inputs: Vec<VarId>,
    input_col: Vec<Option<usize>>,
    output_index: HashMap<VarId, usize>,
}

/// Solver-facing view of an [`NlpModel`] in scaled coordinates
/// `x_solver = x_model * scale`.
#[derive(Clone, Debug)]
pub struct ModelProblem {
    cols: Vec<VarId>,
    scale: Vec<f64>,
    col_of: Vec<Option<usize>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    objective: Tape,
    cons: Vec<Tape>,
    names: Vec<String>,
    ineq: Vec<bool>,
    point: Vec<f64>,
    external: Option<External>,
    ws: TapeWorkspace,
    grad: Vec<(VarId, f64)>,
}

impl ModelProblem {
    /// `point` is a full model point; it seeds fixed values and the inner
    /// solver's first guess.
    pub fn new(model: &NlpModel, inner: BlockSolveOptions, point: &[f64]) -> Result<Self, ProblemError> {
        let cols = model.solver_vars();
        let mut col_of = vec![None; model.vars().len()];
        for (c, v) in cols.iter().enumerate() {
            col_of[v.0] = Some(c);
        }
        let scale: Vec<f64> = cols.iter().map(|&v| model.var(v).scale).collect();
        let lower = cols.iter().zip(&scale).map(|(&v, s)| model.var(v).lower * s).collect();
        let upper = cols.iter().zip(&scale).map(|(&v, s)| model.var(v).upper * s).collect();
        let external = match model.external() {
            None => None,
            Some(sub) => {
                let f = ImplicitFunction::new(sub.clone(), inner, point)?;
                Some(External {
                    inputs: sub.inputs.clone(),
                    input_col: sub.inputs.iter().map(|v| col_of[v.0]).collect(),
                    output_index: sub.outputs.iter().enumerate().map(|(i, &v)| (v, i)).collect(),
                    f,
                })
            }
        };
        Ok(ModelProblem {
            lower,
            upper,
            objective: model.objective().compile(),
            cons: model.constraints().iter().map(|c| c.residual.compile()).collect(),
            names: model.constraints().iter().map(|c| c.name.clone()).collect(),
            ineq: model.constraints().iter().map(|c| c.kind == ConstraintKind::Inequality).collect(),
            point: point.to_vec(),
            external,
            cols,
            scale,
            col_of,
            ws: TapeWorkspace::default(),
            grad: Vec::new(),
        })
    }

    pub fn num_vars(&self) -> usize {
        self.cols.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.cons.len()
    }

    pub fn inequality_mask(&self) -> &[bool] {
        &self.ineq
    }

    pub fn constraint_names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[VarId] {
        &self.cols
    }

    /// Scaled bounds.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    /// Scaled solver vector of a full model point.
    pub fn scaled_point(&self, full: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.cols.len(), self.cols.iter().zip(&self.scale).map(|(v, s)| full[v.0] * s))
    }

    /// Full model point for the last loaded solver vector, including any
    /// externally computed outputs.
    pub fn full_point(&self) -> &[f64] {
        &self.point
    }

    pub fn inner_iterations(&self) -> usize {
        self.external.as_ref().map_or(0, |e| e.f.last_iterations())
    }

    fn load(&mut self, x: &DVector<f64>) {
        for (c, v) in self.cols.iter().enumerate() {
            self.point[v.0] = x[c] / self.scale[c];
        }
    }

    fn solve_external(&mut self) -> Result<Option<DMatrix<f64>>, ProblemError> {
        let Some(ext) = &mut self.external else { return Ok(None) };
        let inputs: Vec<f64> = ext.inputs.iter().map(|v| self.point[v.0]).collect();
        let outs = ext.f.eval_outputs(&inputs)?;
        for (v, &i) in &ext.output_index {
            self.point[v.0] = outs[i];
        }
        Ok(Some(ext.f.jacobian_outputs(&inputs)?))
    }

    fn solve_external_values(&mut self) -> Result<(), ProblemError> {
        let Some(ext) = &mut self.external else { return Ok(()) };
        let inputs: Vec<f64> = ext.inputs.iter().map(|v| self.point[v.0]).collect();
        let outs = ext.f.eval_outputs(&inputs)?;
        for (v, &i) in &ext.output_index {
            self.point[v.0] = outs[i];
        }
        Ok(())
    }

    /// Maximized objective and constraint residuals.
    pub fn eval_values(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), ProblemError> {
        self.load(x);
        self.solve_external_values()?;
        let f = self
            .objective
            .eval_with(&self.point, &mut self.ws)
            .map_err(|error| ProblemError::Expression { constraint: "objective".into(), error })?;
        let mut c = DVector::zeros(self.cons.len());
        for (r, t) in self.cons.iter().enumerate() {
            c[r] = t
                .eval_with(&self.point, &mut self.ws)
                .map_err(|error| ProblemError::Expression { constraint: self.names[r].clone(), error })?;
        }
        Ok((f, c))
    }

    /// Objective gradient and dense constraint Jacobian in scaled
    /// coordinates, with implicit outputs eliminated by the chain rule.
    pub fn eval_derivatives(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), ProblemError> {
        self.load(x);
        let dy = self.solve_external()?;
        let n = self.cols.len();
        let mut g = DVector::zeros(n);
        let mut row = vec![0.0; n];
        self.row_gradient(None, dy.as_ref(), &mut row)?;
        g.copy_from_slice(&row);
        let mut j = DMatrix::zeros(self.cons.len(), n);
        for r in 0..self.cons.len() {
            self.row_gradient(Some(r), dy.as_ref(), &mut row)?;
            for (c, &v) in row.iter().enumerate() {
                j[(r, c)] = v;
            }
        }
        Ok((g, j))
    }

    fn row_gradient(&mut self, r: Option<usize>, dy: Option<&DMatrix<f64>>, out: &mut [f64]) -> Result<(), ProblemError> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let tape = match r {
            None => &self.objective,
            Some(r) => &self.cons[r],
        };
        tape.gradient_with(&self.point, &mut self.ws, &mut self.grad).map_err(|error| ProblemError::Expression {
            constraint: r.map_or_else(|| "objective".to_string(), |r| self.names[r].clone()),
            error,
        })?;
        let mut gy: Vec<(usize, f64)> = Vec::new();
        for &(v, d) in &self.grad {
            if let Some(c) = self.col_of[v.0] {
                out[c] += d;
            } else if let Some(ext) = &self.external {
                if let Some(&k) = ext.output_index.get(&v) {
                    gy.push((k, d));
                }
            }
        }
        if let (Some(ext), Some(dy)) = (&self.external, dy) {
            for &(k, d) in &gy {
                for (i, col) in ext.input_col.iter().enumerate() {
                    if let Some(c) = col {
                        out[*c] += d * dy[(k, i)];
                    }
                }
            }
        }
        for (c, v) in out.iter_mut().enumerate() {
            *v /= self.scale[c];
        }
        Ok(())
    }
}
