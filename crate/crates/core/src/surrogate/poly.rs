//! Polynomial surrogates over the basis `{1, v, v^2, v^3}` with greedy
//! forward term selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split, INPUT_NAMES};
use super::{Predictor, SurrogateError, FORMAT_VERSION};
use crate::expr::Expr;

/// `inputs[input]^power`, or the constant 1 when `input` is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub input: Option<usize>,
    pub power: u32,
}

impl Term {
    pub const CONSTANT: Term = Term { input: None, power: 0 };

    pub fn new(input: usize, power: u32) -> Self {
        Term { input: Some(input), power }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self.input {
            None => 1.0,
            Some(i) => x[i].powi(self.power as i32),
        }
    }

    fn expr(&self, x: &[Expr]) -> Expr {
        match self.input {
            None => Expr::constant(1.0),
            Some(i) if self.power == 1 => x[i].clone(),
            Some(i) => x[i].clone().powi(self.power as i32),
        }
    }

    /// Candidate basis over `n` inputs: the constant, then each input at
    /// powers 1, 2, 3.
    pub fn basis(n: usize) -> Vec<Term> {
        let mut b = vec![Term::CONSTANT];
        for i in 0..n {
            for p in 1..=3 {
                b.push(Term::new(i, p));
            }
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyOutput {
    pub name: String,
    /// Evaluated as `((0 + c0 t0) + c1 t1) + ...` in this order.
    pub terms: Vec<(Term, f64)>,
}

impl PolyOutput {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (t, c) in &self.terms {
            acc += c * t.value(x);
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySurrogate {
    pub format_version: u32,
    pub input_names: Vec<String>,
    pub outputs: Vec<PolyOutput>,
}

impl PolySurrogate {
    pub fn new(input_names: Vec<String>, outputs: Vec<PolyOutput>) -> Self {
        PolySurrogate { format_version: FORMAT_VERSION, input_names, outputs }
    }

    /// One expression per output over the input expressions.
    pub fn exprs(&self, inputs: &[Expr]) -> Vec<Expr> {
        self.outputs
            .iter()
            .map(|o| Expr::sum(o.terms.iter().map(|(t, c)| match t.input {
                None => Expr::constant(*c),
                Some(_) => *c * t.expr(inputs),
            })))
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<(), SurrogateError> {
        for o in &self.outputs {
            for (t, c) in &o.terms {
                if t.input.is_some_and(|i| i >= self.input_names.len()) || t.power > 3 || !c.is_finite() {
                    return Err(SurrogateError::Malformed(format!("bad term {t:?} in output `{}`", o.name)));
                }
            }
        }
        Ok(())
    }
}

impl Predictor for PolySurrogate {
    fn output_names(&self) -> Vec<String> {
        self.outputs.iter().map(|o| o.name.clone()).collect()
    }

    fn predict(&self, inputs: &[f64]) -> Vec<f64> {
        self.outputs.iter().map(|o| o.eval(inputs)).collect()
    }
}

pub fn eval_poly(s: &PolySurrogate, inputs: &[f64]) -> Vec<f64> {
    s.predict(inputs)
}

/// The published 13-output surrogate of the full-size reformer over inputs
/// ([`INPUT_NAMES`]; `T_ref` does not appear). Conversion is a fraction.
pub fn reference_surrogate() -> PolySurrogate {
    const FS: usize = 0;
    const FR: usize = 2;
    const X: usize = 3;
    let t = Term::new;
    let c = Term::CONSTANT;
    let out = |name: &str, terms: Vec<(Term, f64)>| PolyOutput { name: name.to_string(), terms };
    PolySurrogate::new(
        INPUT_NAMES.iter().map(|s| s.to_string()).collect(),
        vec![
            out("T_out", vec![(t(FS, 1), -0.30), (t(FR, 3), 0.23e-6), (t(X, 3), 296.45), (c, 805.36)]),
            out("F_out", vec![(t(FR, 1), 4.17), (t(FS, 1), 1.15), (t(FR, 2), -0.00098), (t(X, 2), 727.69)]),
            out("x_H2", vec![(t(FR, 2), 0.77e-6), (t(X, 2), 0.49), (t(FR, 3), -0.50e-9), (t(X, 3), -0.23)]),
            out("x_CO", vec![(t(FS, 1), -0.00014), (t(FR, 2), 0.58e-6), (t(FR, 3), -0.39e-9), (t(X, 3), 0.09)]),
            out("x_H2O", vec![(t(FS, 1), 0.00017), (t(X, 1), -0.11), (t(FR, 2), -0.46e-6), (t(FR, 3), 0.30e-9), (c, 0.21)]),
            out("x_CO2", vec![(t(FR, 1), -0.00036), (t(FS, 1), 0.000093), (t(X, 1), -0.096), (t(FR, 2), 0.17e-6), (c, 0.25)]),
            out("x_CH4", vec![(t(FR, 1), 0.000014), (t(FS, 1), -0.0000085), (t(X, 1), -0.39), (t(X, 2), 0.10), (c, 0.28)]),
            out(
                "x_C2H6",
                vec![(t(FR, 1), 0.13e-8), (t(FS, 1), -0.12e-8), (t(X, 1), 0.000014), (t(X, 2), -0.000028), (t(X, 3), 0.000014)],
            ),
            out("x_C3H8", vec![(t(X, 1), -0.27e-9), (c, 0.26e-9)]),
            out("x_C4H10", vec![(t(FS, 1), -0.0000048), (t(FR, 2), 0.29e-8)]),
            out("x_N2", vec![(t(FR, 1), -0.00065), (t(FS, 1), -0.000099), (t(X, 1), -0.11), (t(FR, 2), 0.27e-6), (c, 0.76)]),
            out("x_O2", vec![(t(FR, 1), 0.13e-22)]),
            out(
                "x_Ar",
                vec![(t(FR, 1), -0.0000079), (t(FS, 1), -0.0000012), (t(X, 1), -0.0014), (t(FR, 2), 0.33e-8), (c, 0.0092)],
            ),
        ],
    )
}

/// Result of greedy selection for one output.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub terms: Vec<(Term, f64)>,
    /// Validation MSE before any term, then after each accepted term.
    pub history: Vec<f64>,
}

/// Least-squares coefficients of `terms` on the rows of `x`.
fn least_squares(terms: &[Term], x: &[&[f64]], y: &[f64]) -> Option<Vec<f64>> {
    let a = DMatrix::from_fn(x.len(), terms.len(), |r, c| terms[c].value(x[r]));
    // column equilibration keeps cubes of O(1e3) inputs well conditioned
    let scale: Vec<f64> = (0..terms.len()).map(|c| a.column(c).amax().max(f64::MIN_POSITIVE)).collect();
    let mut a_s = a;
    for (c, s) in scale.iter().enumerate() {
        a_s.column_mut(c).scale_mut(1.0 / s);
    }
    let b = DVector::from_column_slice(y);
    let sol = a_s.svd(true, true).solve(&b, 1e-13).ok()?;
    let coef: Vec<f64> = sol.iter().zip(&scale).map(|(v, s)| v / s).collect();
    coef.iter().all(|v| v.is_finite()).then_some(coef)
}

fn mse(terms: &[(Term, f64)], x: &[&[f64]], y: &[f64]) -> f64 {
    let out = PolyOutput { name: String::new(), terms: terms.to_vec() };
    x.iter().zip(y).map(|(xi, yi)| (out.eval(xi) - yi).powi(2)).sum::<f64>() / y.len() as f64
}

/// Greedy forward selection: starting from no terms, add the candidate whose
/// least-squares refit on the training rows most lowers the validation MSE;
/// stop when the best relative improvement is below 1 %, when `budget` terms
/// are selected, or when fewer than two training rows per term remain.
pub fn select_terms(
    candidates: &[Term],
    x_train: &[&[f64]],
    y_train: &[f64],
    x_val: &[&[f64]],
    y_val: &[f64],
    budget: usize,
) -> Selection {
    let mut chosen: Vec<Term> = Vec::new();
    let mut fit: Vec<(Term, f64)> = Vec::new();
    let mut best_mse = mse(&[], x_val, y_val);
    let mut history = vec![best_mse];
    while chosen.len() < budget && 2 * (chosen.len() + 1) <= x_train.len() && best_mse > 0.0 {
        let mut best: Option<(f64, Vec<(Term, f64)>)> = None;
        for cand in candidates.iter().filter(|c| !chosen.contains(c)) {
            let mut terms = chosen.clone();
            terms.push(*cand);
            let Some(coef) = least_squares(&terms, x_train, y_train) else { continue };
            let trial: Vec<(Term, f64)> = terms.into_iter().zip(coef).collect();
            let m = mse(&trial, x_val, y_val);
            if best.as_ref().is_none_or(|(bm, _)| m < *bm) {
                best = Some((m, trial));
            }
        }
        match best {
            Some((m, trial)) if (best_mse - m) >= 0.01 * best_mse => {
                best_mse = m;
                chosen = trial.iter().map(|(t, _)| *t).collect();
                fit = trial;
                history.push(m);
            }
            _ => break,
        }
    }
    Selection { terms: fit, history }
}

/// Fits every output by [`select_terms`] over [`Term::basis`]. A constant
/// training column is fitted by the constant term alone.
pub fn train_poly(data: &Dataset, budget: usize) -> Result<PolySurrogate, SurrogateError> {
    let tr = data.indices(Split::Train);
    let va = data.indices(Split::Validation);
    if tr.len() < 2 {
        return Err(SurrogateError::DegenerateData(format!("{} training rows", tr.len())));
    }
    // selection needs held-out rows; without them the training rows stand in
    let va = if va.is_empty() { tr.clone() } else { va };
    let x_tr: Vec<&[f64]> = tr.iter().map(|&i| data.inputs[i].as_slice()).collect();
    let x_va: Vec<&[f64]> = va.iter().map(|&i| data.inputs[i].as_slice()).collect();
    let basis = Term::basis(data.input_names.len());
    let mut outputs = Vec::new();
    for (k, name) in data.output_names.iter().enumerate() {
        let y_tr: Vec<f64> = tr.iter().map(|&i| data.outputs[i][k]).collect();
        let y_va: Vec<f64> = va.iter().map(|&i| data.outputs[i][k]).collect();
        let first = y_tr[0];
        let terms = if y_tr.iter().all(|&v| v == first) {
            vec![(Term::CONSTANT, first)]
        } else {
            select_terms(&basis, &x_tr, &y_tr, &x_va, &y_va, budget).terms
        };
        outputs.push(PolyOutput { name: name.clone(), terms });
    }
    Ok(PolySurrogate::new(data.input_names.clone(), outputs))
}
