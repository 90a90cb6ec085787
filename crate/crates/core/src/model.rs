//! NLP container: variables, tagged constraints, objective and parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{incidence_vars, Expr, VarId};
use crate::incidence::{maximum_matching, IncidenceError, IncidenceGraph};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("subsystem is not square: {equations} equations, {outputs} outputs")]
    NotSquare { equations: usize, outputs: usize },
    #[error("subsystem is structurally singular ({matched} of {size} equations matched)")]
    StructurallySingular { matched: usize, size: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("operation requires a {expected:?} model, got {found:?}")]
    WrongFormulation { expected: Formulation, found: Formulation },
    #[error("output `{0}` does not appear in any subsystem equation")]
    UnusedOutput(String),
}

impl From<IncidenceError> for ModelError {
    fn from(e: IncidenceError) -> Self {
        match e {
            IncidenceError::StructurallySingular { matched, size } => {
                ModelError::StructurallySingular { matched, size }
            }
            IncidenceError::NotSquare { equations, variables } => {
                ModelError::NotSquare { equations, outputs: variables }
            }
            IncidenceError::IndexOutOfRange { equation, .. } => {
                ModelError::NotSquare { equations: equation, outputs: 0 }
            }
        }
    }
}

/// Which part of the flowsheet a constraint (or variable) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    /// Operational limits `G(x, u) <= 0`.
    Operational,
    /// Unit-model equations outside the reactor.
    Internal,
    /// Equalities connecting reactor outlets to downstream inlets.
    Linking,
    /// First-principles reactor equations `R(x, y, u) = 0`.
    Reactor,
    /// Surrogate replacement of the reactor.
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// `residual = 0`
    Equality,
    /// `residual <= 0`
    Inequality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Formulation {
    FullSpace,
    SurrogateAlamo,
    SurrogateNn,
    Implicit,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [
        Formulation::FullSpace,
        Formulation::Implicit,
        Formulation::SurrogateAlamo,
        Formulation::SurrogateNn,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Formulation::FullSpace => "full",
            Formulation::SurrogateAlamo => "alamo",
            Formulation::SurrogateNn => "nn",
            Formulation::Implicit => "implicit",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Formulation::ALL.into_iter().find(|f| f.short_name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub value: f64,
    /// The solver works with `value * scale`.
    pub scale: f64,
    /// Fixed variables act as parameters and are invisible to the solver.
    pub fixed: bool,
    /// Unit block owning the variable, if any.
    pub owner: Option<Tag>,
}

impl Variable {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Variable {
            name: name.into(),
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            value,
            scale: 1.0,
            fixed: false,
            owner: None,
        }
    }

    pub fn bounds(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn lower(mut self, lower: f64) -> Self {
        self.lower = lower;
        self
    }

    pub fn scale(mut self, scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
        self.scale = scale;
        self
    }

    pub fn owned_by(mut self, tag: Tag) -> Self {
        self.owner = Some(tag);
        self
    }

    /// Value clipped into the bounds.
    pub fn clipped(&self) -> f64 {
        self.value.max(self.lower).min(self.upper)
    }
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub name: String,
    pub residual: Expr,
    pub kind: ConstraintKind,
    pub tag: Tag,
}

impl Constraint {
    pub fn equality(name: impl Into<String>, residual: Expr, tag: Tag) -> Self {
        Constraint { name: name.into(), residual, kind: ConstraintKind::Equality, tag }
    }

    pub fn inequality(name: impl Into<String>, residual: Expr, tag: Tag) -> Self {
        Constraint { name: name.into(), residual, kind: ConstraintKind::Inequality, tag }
    }
}

/// Square block `R(x, y, u) = 0` solved for `outputs` given `inputs`.
#[derive(Clone, Debug)]
pub struct SquareSubsystem {
    pub equations: Vec<Constraint>,
    pub outputs: Vec<VarId>,
    pub inputs: Vec<VarId>,
    /// Bounds on each output, used by step clipping.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SquareSubsystem {
    /// Checks squareness and structural nonsingularity.
    pub fn new(
        equations: Vec<Constraint>,
        outputs: Vec<VarId>,
        names: impl Fn(VarId) -> String,
    ) -> Result<Self, ModelError> {
        if equations.len() != outputs.len() || equations.is_empty() {
            return Err(ModelError::NotSquare { equations: equations.len(), outputs: outputs.len() });
        }
        let out_set: BTreeSet<VarId> = outputs.iter().copied().collect();
        let mut inputs = BTreeSet::new();
        let mut used = BTreeSet::new();
        for c in &equations {
            for v in incidence_vars(&c.residual) {
                if out_set.contains(&v) {
                    used.insert(v);
                } else {
                    inputs.insert(v);
                }
            }
        }
        if let Some(v) = outputs.iter().find(|v| !used.contains(v)) {
            return Err(ModelError::UnusedOutput(names(*v)));
        }
        let n = outputs.len();
        let sub = SquareSubsystem {
            equations,
            outputs,
            inputs: inputs.into_iter().collect(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        };
        maximum_matching(&sub.incidence())?;
        Ok(sub)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Equation → output incidence (indices into `outputs`).
    pub fn incidence(&self) -> IncidenceGraph {
        let pos: BTreeMap<VarId, usize> = self.outputs.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let adj = self
            .equations
            .iter()
            .map(|c| incidence_vars(&c.residual).into_iter().filter_map(|v| pos.get(&v).copied()).collect())
            .collect();
        IncidenceGraph::new(self.outputs.len(), adj).expect("indices come from the output map")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statistics {
    pub variables: usize,
    pub constraints: usize,
    pub equalities: usize,
    pub inequalities: usize,
}

#[derive(Clone, Debug)]
pub struct NlpModel {
    pub formulation: Formulation,
    vars: Vec<Variable>,
    cons: Vec<Constraint>,
    /// Maximized.
    objective: Expr,
    params: BTreeMap<String, VarId>,
    /// Reactor block evaluated outside the solver (implicit formulation).
    external: Option<SquareSubsystem>,
}

impl NlpModel {
    pub fn new(formulation: Formulation) -> Self {
        NlpModel {
            formulation,
            vars: Vec::new(),
            cons: Vec::new(),
            objective: Expr::constant(0.0),
            params: BTreeMap::new(),
            external: None,
        }
    }

    pub fn add_var(&mut self, v: Variable) -> VarId {
        self.vars.push(v);
        VarId(self.vars.len() - 1)
    }

    /// Registers a named parameter as a fixed variable.
    pub fn add_param(&mut self, name: &str, value: f64) -> VarId {
        let mut v = Variable::new(name, value);
        v.fixed = true;
        let id = self.add_var(v);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn add_constraint(&mut self, c: Constraint) -> usize {
        self.cons.push(c);
        self.cons.len() - 1
    }

    pub fn set_objective(&mut self, objective: Expr) {
        self.objective = objective;
    }

    pub fn objective(&self) -> &Expr {
        &self.objective
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn var(&self, id: VarId) -> &Variable {
        &self.vars[id.0]
    }

    pub fn var_mut(&mut self, id: VarId) -> &mut Variable {
        &mut self.vars[id.0]
    }

    pub fn find_var(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.cons
    }

    pub fn constraints_with_tag(&self, tag: Tag) -> impl Iterator<Item = &Constraint> {
        self.cons.iter().filter(move |c| c.tag == tag)
    }

    pub fn params(&self) -> &BTreeMap<String, VarId> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<f64, ModelError> {
        self.params
            .get(name)
            .map(|&id| self.vars[id.0].value)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn fix_parameter(&mut self, name: &str, value: f64) -> Result<(), ModelError> {
        let id = *self.params.get(name).ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        self.vars[id.0].value = value;
        Ok(())
    }

    pub fn external(&self) -> Option<&SquareSubsystem> {
        self.external.as_ref()
    }

    /// Current value of every registered variable, indexed by [`VarId`].
    pub fn values(&self) -> Vec<f64> {
        self.vars.iter().map(|v| v.value).collect()
    }

    pub fn set_values(&mut self, values: &[f64]) {
        for (v, &x) in self.vars.iter_mut().zip(values) {
            if !v.fixed {
                v.value = x;
            }
        }
    }

    /// Variables the optimizer sees: referenced by the objective, a
    /// constraint or the external block, not fixed, not computed externally.
    pub fn solver_vars(&self) -> Vec<VarId> {
        let hidden: BTreeSet<VarId> =
            self.external.iter().flat_map(|s| s.outputs.iter().copied()).collect();
        let mut referenced = incidence_vars(&self.objective);
        for c in &self.cons {
            referenced.extend(incidence_vars(&c.residual));
        }
        if let Some(sub) = &self.external {
            referenced.extend(sub.inputs.iter().copied());
        }
        referenced
            .into_iter()
            .filter(|id| !self.vars[id.0].fixed && !hidden.contains(id))
            .collect()
    }

    pub fn statistics(&self) -> Statistics {
        let equalities = self.cons.iter().filter(|c| c.kind == ConstraintKind::Equality).count();
        let inequalities = self.cons.len() - equalities;
        Statistics {
            variables: self.solver_vars().len(),
            constraints: self.cons.len(),
            equalities,
            inequalities,
        }
    }

    /// Moves the equations of `sub` out of the solver-visible constraint
    /// list; its outputs become externally computed.
    pub(crate) fn externalize(&mut self, sub: SquareSubsystem) {
        let names: BTreeSet<&str> = sub.equations.iter().map(|c| c.name.as_str()).collect();
        self.cons.retain(|c| !names.contains(c.name.as_str()));
        self.external = Some(sub);
    }

    /// Removes every constraint with the given tag and returns them.
    pub(crate) fn remove_constraints(&mut self, pred: impl Fn(&Constraint) -> bool) -> Vec<Constraint> {
        let (taken, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.cons).into_iter().partition(|c| pred(c));
        self.cons = kept;
        taken
    }

    /// Human-readable listing for debugging; not a stable format.
    pub fn dump(&self) -> String {
        let names = |v: VarId| self.vars[v.0].name.clone();
        let mut out = String::new();
        let _ = writeln!(out, "formulation {:?}", self.formulation);
        let s = self.statistics();
        let _ = writeln!(
            out,
            "{} variables, {} constraints ({} eq, {} ineq)",
            s.variables, s.constraints, s.equalities, s.inequalities
        );
        let _ = writeln!(out, "\nparameters:");
        for (name, id) in &self.params {
            let _ = writeln!(out, "  {name} = {}", self.vars[id.0].value);
        }
        let _ = writeln!(out, "\nvariables:");
        for id in self.solver_vars() {
            let v = &self.vars[id.0];
            let _ = writeln!(out, "  {:<28} [{:>12.5e}, {:>12.5e}] = {:.8e}", v.name, v.lower, v.upper, v.value);
        }
        let _ = writeln!(out, "\nmaximize {}", self.objective.display_with(&names));
        let _ = writeln!(out, "\nconstraints:");
        for c in &self.cons {
            let op = match c.kind {
                ConstraintKind::Equality => "= 0",
                ConstraintKind::Inequality => "<= 0",
            };
            let _ = writeln!(out, "  [{:?}] {}: {} {op}", c.tag, c.name, c.residual.display_with(&names));
        }
        if let Some(sub) = &self.external {
            let _ = writeln!(out, "\nexternal block ({} equations):", sub.len());
            for c in &sub.equations {
                let _ = writeln!(out, "  {}: {} = 0", c.name, c.residual.display_with(&names));
            }
        }
        out
    }
}

/// Carves out the square block whose equations carry `tag`. Outputs are the
/// variables owned by that block; inputs are every other incident variable.
pub fn extract_subsystem(model: &NlpModel, tag: Tag) -> Result<SquareSubsystem, ModelError> {
    if model.formulation != Formulation::FullSpace {
        return Err(ModelError::WrongFormulation { expected: Formulation::FullSpace, found: model.formulation });
    }
    let equations: Vec<Constraint> = model
        .constraints_with_tag(tag)
        .filter(|c| c.kind == ConstraintKind::Equality)
        .cloned()
        .collect();
    let outputs: Vec<VarId> = (0..model.vars.len())
        .map(VarId)
        .filter(|id| model.vars[id.0].owner == Some(tag) && !model.vars[id.0].fixed)
        .collect();
    let mut sub = SquareSubsystem::new(equations, outputs, |v| model.var(v).name.clone())?;
    sub.lower = sub.outputs.iter().map(|&v| model.var(v).lower).collect();
    sub.upper = sub.outputs.iter().map(|&v| model.var(v).upper).collect();
    Ok(sub)
}
