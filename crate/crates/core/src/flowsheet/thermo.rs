//! Ideal-gas properties from cubic heat-capacity polynomials.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expr, Function};

/// J/(mol K)
pub const R_GAS: f64 = 8.314462618;
/// K
pub const T_REF: f64 = 298.15;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("thermo config has no species")]
    Empty,
    #[error("duplicate species `{0}`")]
    Duplicate(String),
    #[error("inert species `{0}` is not in the species list")]
    UnknownInert(String),
    #[error("species `{0}` is referenced but not defined")]
    UnknownSpecies(String),
    #[error("species `{0}` has no elements")]
    NoElements(String),
    #[error("element matrix of non-inert species has rank {rank}, expected {elements}")]
    RankDeficient { rank: usize, elements: usize },
    #[error("composition `{name}` sums to {sum}, expected 1")]
    Composition { name: String, sum: f64 },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Pure-component data. Heat capacity `cp = A + B T + C T^2 + D T^3` in
/// J/(mol K); formation enthalpy in J/mol and absolute entropy in J/(mol K),
/// both at 298.15 K and the reference pressure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesData {
    pub name: String,
    pub elements: BTreeMap<String, f64>,
    pub cp: [f64; 4],
    pub h_form: f64,
    pub s_form: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermoConfig {
    pub species: Vec<SpeciesData>,
    /// Species carried through the reactor by balance only.
    pub inert: Vec<String>,
    /// Pa
    pub p_ref: f64,
}

fn sp(name: &str, elements: &[(&str, f64)], cp: [f64; 4], h_form: f64, s_form: f64) -> SpeciesData {
    SpeciesData {
        name: name.to_string(),
        elements: elements.iter().map(|(e, n)| (e.to_string(), *n)).collect(),
        cp,
        h_form,
        s_form,
    }
}

impl Default for ThermoConfig {
    /// Natural-gas reforming set; heat capacities from the Reid, Prausnitz
    /// and Poling tables.
    fn default() -> Self {
        ThermoConfig {
            species: vec![
                sp("CH4", &[("C", 1.0), ("H", 4.0)], [19.25, 5.213e-2, 1.197e-5, -1.132e-8], -74_870.0, 186.25),
                sp("C2H6", &[("C", 2.0), ("H", 6.0)], [5.409, 1.781e-1, -6.938e-5, 8.713e-9], -83_820.0, 229.2),
                sp("C3H8", &[("C", 3.0), ("H", 8.0)], [-4.224, 3.063e-1, -1.586e-4, 3.215e-8], -104_680.0, 270.3),
                sp("H2O", &[("H", 2.0), ("O", 1.0)], [32.24, 1.924e-3, 1.055e-5, -3.596e-9], -241_826.0, 188.84),
                sp("H2", &[("H", 2.0)], [27.14, 9.274e-3, -1.381e-5, 7.645e-9], 0.0, 130.68),
                sp("CO", &[("C", 1.0), ("O", 1.0)], [30.87, -1.285e-2, 2.789e-5, -1.272e-8], -110_530.0, 197.66),
                sp("CO2", &[("C", 1.0), ("O", 2.0)], [19.80, 7.344e-2, -5.602e-5, 1.715e-8], -393_510.0, 213.79),
                sp("O2", &[("O", 2.0)], [28.11, -3.680e-6, 1.746e-5, -1.065e-8], 0.0, 205.15),
                sp("N2", &[("N", 2.0)], [31.15, -1.357e-2, 2.680e-5, -1.168e-8], 0.0, 191.61),
                sp("Ar", &[("Ar", 1.0)], [20.786, 0.0, 0.0, 0.0], 0.0, 154.85),
            ],
            inert: vec!["N2".into(), "Ar".into()],
            p_ref: 101_325.0,
        }
    }
}

impl ThermoConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ThermoConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("thermo config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.species.is_empty() {
            return Err(ConfigError::Empty);
        }
        let mut seen = BTreeSet::new();
        for s in &self.species {
            if !seen.insert(s.name.as_str()) {
                return Err(ConfigError::Duplicate(s.name.clone()));
            }
            if s.elements.is_empty() || s.elements.values().all(|&n| n == 0.0) {
                return Err(ConfigError::NoElements(s.name.clone()));
            }
            let finite = s.cp.iter().chain([&s.h_form, &s.s_form]).all(|v| v.is_finite())
                && s.elements.values().all(|v| v.is_finite() && *v >= 0.0);
            if !finite {
                return Err(ConfigError::Invalid(format!("species `{}` has non-finite or negative data", s.name)));
            }
        }
        for i in &self.inert {
            if !seen.contains(i.as_str()) {
                return Err(ConfigError::UnknownInert(i.clone()));
            }
        }
        if !(self.p_ref > 0.0 && self.p_ref.is_finite()) {
            return Err(ConfigError::Invalid("p_ref must be positive".into()));
        }
        let elements = self.elements();
        let active = self.reactive_species();
        if active.is_empty() {
            return Err(ConfigError::Empty);
        }
        let a = DMatrix::from_fn(elements.len(), active.len(), |e, j| self.beta(active[j], &elements[e]));
        let rank = a.rank(1e-9);
        if rank != elements.len() {
            return Err(ConfigError::RankDeficient { rank, elements: elements.len() });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.species.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn is_inert(&self, j: usize) -> bool {
        self.inert.iter().any(|n| *n == self.species[j].name)
    }

    /// Indices of non-inert species.
    pub fn reactive_species(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.is_inert(j)).collect()
    }

    pub fn inert_species(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.is_inert(j)).collect()
    }

    /// Elements present in non-inert species, sorted.
    pub fn elements(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .reactive_species()
            .into_iter()
            .flat_map(|j| self.species[j].elements.iter().filter(|(_, &n)| n != 0.0).map(|(e, _)| e))
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn beta(&self, j: usize, element: &str) -> f64 {
        self.species[j].elements.get(element).copied().unwrap_or(0.0)
    }

    pub fn cp(&self, j: usize, t: f64) -> f64 {
        let [a, b, c, d] = self.species[j].cp;
        a + t * (b + t * (c + t * d))
    }

    /// Molar enthalpy including formation, J/mol.
    pub fn enthalpy(&self, j: usize, t: f64) -> f64 {
        let s = &self.species[j];
        let [a, b, c, d] = s.cp;
        let t0 = T_REF;
        s.h_form
            + a * (t - t0)
            + b / 2.0 * (t * t - t0 * t0)
            + c / 3.0 * (t * t * t - t0 * t0 * t0)
            + d / 4.0 * (t * t * t * t - t0 * t0 * t0 * t0)
    }

    /// Standard-state entropy at `t`, J/(mol K).
    pub fn entropy_std(&self, j: usize, t: f64) -> f64 {
        let s = &self.species[j];
        let [a, b, c, d] = s.cp;
        let t0 = T_REF;
        s.s_form + a * (t / t0).ln() + b * (t - t0) + c / 2.0 * (t * t - t0 * t0) + d / 3.0 * (t * t * t - t0 * t0 * t0)
    }

    /// Pure-component Gibbs energy at `t` and `p`, J/mol.
    pub fn gibbs_pure(&self, j: usize, t: f64, p: f64) -> f64 {
        self.enthalpy(j, t) - t * (self.entropy_std(j, t) - R_GAS * (p / self.p_ref).ln())
    }

    /// Ideal-gas partial molar Gibbs energy of species `j` at mole fraction
    /// `x`, J/mol.
    pub fn partial_gibbs(&self, j: usize, t: f64, p: f64, x: f64) -> Result<f64, EvalError> {
        if !(t > 0.0) {
            return Err(EvalError::DomainViolation { func: Function::Ln, arg: t });
        }
        if !(p > 0.0) {
            return Err(EvalError::DomainViolation { func: Function::Ln, arg: p });
        }
        if !(x > 0.0) {
            return Err(EvalError::DomainViolation { func: Function::Ln, arg: x });
        }
        let s = self.entropy_std(j, t) - R_GAS * (p / self.p_ref).ln() - R_GAS * x.ln();
        Ok(self.enthalpy(j, t) - t * s)
    }

    /// Enthalpy of a fixed-composition mixture, J/mol.
    pub fn mixture_enthalpy(&self, y: &[f64], t: f64) -> f64 {
        y.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| v * self.enthalpy(j, t)).sum()
    }

    pub fn enthalpy_expr(&self, j: usize, t: &Expr) -> Expr {
        let s = &self.species[j];
        let [a, b, c, d] = s.cp;
        let t0 = T_REF;
        let offset = s.h_form - (a * t0 + b / 2.0 * t0 * t0 + c / 3.0 * t0.powi(3) + d / 4.0 * t0.powi(4));
        let mut terms = vec![Expr::constant(offset), a * t.clone()];
        if b != 0.0 {
            terms.push(b / 2.0 * t.clone().powi(2));
        }
        if c != 0.0 {
            terms.push(c / 3.0 * t.clone().powi(3));
        }
        if d != 0.0 {
            terms.push(d / 4.0 * t.clone().powi(4));
        }
        Expr::sum(terms)
    }

    pub fn entropy_std_expr(&self, j: usize, t: &Expr) -> Expr {
        let s = &self.species[j];
        let [a, b, c, d] = s.cp;
        let t0 = T_REF;
        let offset = s.s_form - (a * t0.ln() + b * t0 + c / 2.0 * t0 * t0 + d / 3.0 * t0.powi(3));
        let mut terms = vec![Expr::constant(offset), a * t.clone().ln()];
        if b != 0.0 {
            terms.push(b * t.clone());
        }
        if c != 0.0 {
            terms.push(c / 2.0 * t.clone().powi(2));
        }
        if d != 0.0 {
            terms.push(d / 3.0 * t.clone().powi(3));
        }
        Expr::sum(terms)
    }

    /// `h - T (s_std - R ln(P/P_ref) - R ln x)`; the logarithm of the mole
    /// fraction is evaluated as written, so `x <= 0` is an evaluation error.
    pub fn partial_gibbs_expr(&self, j: usize, t: &Expr, p: &Expr, x: &Expr) -> Expr {
        let s = self.entropy_std_expr(j, t) - R_GAS * (p.clone() / self.p_ref).ln() - R_GAS * x.clone().ln();
        self.enthalpy_expr(j, t) - t.clone() * s
    }

    /// Enthalpy expression of a fixed-composition mixture.
    pub fn mixture_enthalpy_expr(&self, y: &[f64], t: &Expr) -> Expr {
        Expr::sum(y.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| v * self.enthalpy_expr(j, t)))
    }
}
