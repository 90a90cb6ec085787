//! Numeric Gibbs equilibrium by the element-potential method.
//!
//! With dimensionless potentials `pi_e = L_e / (R T)` every non-inert mole
//! fraction is explicit, `ln x_j = -g_j(T, P) / (R T) - sum_e beta_je pi_e`,
//! and the remaining unknowns are the potentials and `ln F`. The residuals are
//! written in log form so they stay finite for trace species.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::thermo::{ThermoConfig, R_GAS};
use crate::expr::EvalError;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EquilibriumError {
    #[error("feed contains no `{0}`")]
    MissingElement(String),
    #[error("equilibrium iteration did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("no temperature in [{lo}, {hi}] K balances the enthalpy")]
    NoTemperature { lo: f64, hi: f64 },
    #[error("conversion {target} is not reachable (bracket reached {reached})")]
    Unreachable { target: f64, reached: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Reactor outlet at equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactorState {
    /// K
    pub temperature: f64,
    /// Pa
    pub pressure: f64,
    /// mol/s
    pub total_flow: f64,
    pub x: Vec<f64>,
    /// Element multipliers `L_e`, J/mol, in [`ThermoConfig::elements`] order.
    pub multipliers: Vec<f64>,
    /// Partial molar Gibbs energies, J/mol; `NaN` for species at zero fraction.
    pub partial_gibbs: Vec<f64>,
}

impl ReactorState {
    pub fn flows(&self) -> Vec<f64> {
        self.x.iter().map(|x| x * self.total_flow).collect()
    }
}

/// Residuals of the equilibrium conditions for `state` fed by `feed` (mol/s
/// per species) with total inlet enthalpy `h_in` (W): stationarity of each
/// non-inert species, element balances, inert balances, closure of the mole
/// fractions and the adiabatic enthalpy balance, in that order.
pub fn gibbs_residuals(state: &ReactorState, feed: &[f64], h_in: f64, cfg: &ThermoConfig) -> Result<Vec<f64>, EvalError> {
    let elements = cfg.elements();
    let (t, p, f) = (state.temperature, state.pressure, state.total_flow);
    let mut r = Vec::new();
    for j in cfg.reactive_species() {
        let g = cfg.partial_gibbs(j, t, p, state.x[j])?;
        let l: f64 = elements.iter().zip(&state.multipliers).map(|(e, l)| l * cfg.beta(j, e)).sum();
        r.push(g + l);
    }
    for e in &elements {
        let out: f64 = cfg.reactive_species().into_iter().map(|j| cfg.beta(j, e) * state.x[j] * f).sum();
        let inp: f64 = cfg.reactive_species().into_iter().map(|j| cfg.beta(j, e) * feed[j]).sum();
        r.push(out - inp);
    }
    for i in cfg.inert_species() {
        r.push(state.x[i] * f - feed[i]);
    }
    r.push(state.x.iter().sum::<f64>() - 1.0);
    let h_out: f64 = (0..cfg.len()).map(|j| state.x[j] * f * cfg.enthalpy(j, t)).sum();
    r.push(h_out - h_in);
    Ok(r)
}

/// Warm-start data for [`equilibrium_tp`]: potentials then `ln F`.
pub type Guess = Vec<f64>;

struct Layout {
    reactive: Vec<usize>,
    inert: Vec<usize>,
    beta: DMatrix<f64>,
    b: Vec<f64>,
    n_inert: f64,
}

fn layout(cfg: &ThermoConfig, feed: &[f64]) -> Result<Layout, EquilibriumError> {
    if feed.len() != cfg.len() || feed.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(EquilibriumError::Invalid("feed must have one nonnegative flow per species".into()));
    }
    let elements = cfg.elements();
    let reactive = cfg.reactive_species();
    let inert = cfg.inert_species();
    let beta = DMatrix::from_fn(reactive.len(), elements.len(), |j, e| cfg.beta(reactive[j], &elements[e]));
    let mut b = vec![0.0; elements.len()];
    for (jj, &j) in reactive.iter().enumerate() {
        for (e, be) in b.iter_mut().enumerate() {
            *be += beta[(jj, e)] * feed[j];
        }
    }
    if let Some(e) = b.iter().position(|&v| !(v > 0.0)) {
        return Err(EquilibriumError::MissingElement(elements[e].clone()));
    }
    let n_inert = inert.iter().map(|&i| feed[i]).sum();
    Ok(Layout { reactive, inert, beta, b, n_inert })
}

struct Eval {
    r: DVector<f64>,
    jac: DMatrix<f64>,
    lnx: Vec<f64>,
}

fn residual(l: &Layout, a: &[f64], u: &DVector<f64>) -> Option<Eval> {
    let ne = l.b.len();
    let nr = l.reactive.len();
    let lnf = u[ne];
    let lnx: Vec<f64> = (0..nr).map(|j| a[j] - (0..ne).map(|e| l.beta[(j, e)] * u[e]).sum::<f64>()).collect();
    if lnx.iter().any(|v| !v.is_finite() || *v > 700.0) {
        return None;
    }
    let x: Vec<f64> = lnx.iter().map(|v| v.exp()).collect();
    let mut r = DVector::zeros(ne + 1);
    let mut jac = DMatrix::zeros(ne + 1, ne + 1);
    for e in 0..ne {
        let s: f64 = (0..nr).map(|j| l.beta[(j, e)] * x[j]).sum();
        if !(s > 0.0) {
            return None;
        }
        r[e] = s.ln() + lnf - l.b[e].ln();
        for f in 0..ne {
            jac[(e, f)] = -(0..nr).map(|j| l.beta[(j, e)] * l.beta[(j, f)] * x[j]).sum::<f64>() / s;
        }
        jac[(e, ne)] = 1.0;
    }
    let inert_x = l.n_inert * (-lnf).exp();
    let total: f64 = x.iter().sum::<f64>() + inert_x;
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    r[ne] = total.ln();
    for f in 0..ne {
        jac[(ne, f)] = -(0..nr).map(|j| l.beta[(j, f)] * x[j]).sum::<f64>() / total;
    }
    jac[(ne, ne)] = -inert_x / total;
    if r.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Eval { r, jac, lnx })
}

/// Least-squares potentials that put every species at an equal share.
fn equal_share_potentials(l: &Layout, a: &[f64]) -> DVector<f64> {
    let target = -(l.reactive.len() as f64).ln();
    let rhs = DVector::from_iterator(a.len(), a.iter().map(|v| v - target));
    l.beta.clone().svd(true, true).solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(l.b.len()))
}

/// Damped Newton on the log-form residuals with Levenberg-Marquardt
/// fallback.
fn newton(l: &Layout, a: &[f64], mut u: DVector<f64>) -> Result<(DVector<f64>, Eval), EquilibriumError> {
    let ne = l.b.len();
    let mut cur = residual(l, a, &u).ok_or(EquilibriumError::NoConvergence { residual: f64::INFINITY })?;
    let mut lm = 0.0_f64;
    for _ in 0..300 {
        if cur.r.amax() <= 1e-13 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let step = if lm > 0.0 {
                let jt = cur.jac.transpose();
                let mut n = &jt * &cur.jac;
                for i in 0..ne + 1 {
                    n[(i, i)] += lm;
                }
                n.lu().solve(&(-(&jt * &cur.r)))
            } else {
                cur.jac.clone().lu().solve(&(-&cur.r))
            };
            let Some(mut du) = step.filter(|d| d.iter().all(|v| v.is_finite())) else {
                lm = if lm == 0.0 { 1e-6 } else { lm * 10.0 };
                continue;
            };
            let cap = du.amax();
            if cap > 20.0 {
                du *= 20.0 / cap;
            }
            let mut alpha: f64 = 1.0;
            while alpha > 1e-10 {
                let trial = &u + &du * alpha;
                if let Some(ev) = residual(l, a, &trial) {
                    if ev.r.norm() <= (1.0 - 1e-4 * alpha) * cur.r.norm() {
                        u = trial;
                        cur = ev;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted {
                lm *= 0.1;
                if lm < 1e-12 {
                    lm = 0.0;
                }
                break;
            }
            lm = if lm == 0.0 { 1e-6 } else { lm * 10.0 };
            if lm > 1e12 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    let norm = cur.r.amax();
    if norm <= 1e-11 {
        Ok((u, cur))
    } else {
        Err(EquilibriumError::NoConvergence { residual: norm })
    }
}

/// Minimizes the strictly convex `phi(pi) = sum_j exp(a_j + nu - beta_j pi) + b pi`
/// whose stationary point satisfies the element balances at fixed
/// `nu = ln F`. Returns the potentials and the reactive total.
fn element_balance_at(l: &Layout, a: &[f64], nu: f64, mut pi: DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let ne = l.b.len();
    let nr = l.reactive.len();
    let eval = |pi: &DVector<f64>| -> Option<(f64, Vec<f64>)> {
        let mut n = Vec::with_capacity(nr);
        for j in 0..nr {
            let z = a[j] + nu - (0..ne).map(|e| l.beta[(j, e)] * pi[e]).sum::<f64>();
            if !(z < 700.0) {
                return None;
            }
            n.push(z.exp());
        }
        let phi = n.iter().sum::<f64>() + (0..ne).map(|e| l.b[e] * pi[e]).sum::<f64>();
        Some((phi, n))
    };
    let scale = l.b.iter().cloned().fold(0.0, f64::max);
    // every species carries an element, so a uniform shift of the potentials
    // lowers every exponent
    let worst = (0..nr)
        .map(|j| {
            let atoms: f64 = (0..ne).map(|e| l.beta[(j, e)]).sum();
            (a[j] + nu - (0..ne).map(|e| l.beta[(j, e)] * pi[e]).sum::<f64>()) / atoms
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > 0.0 {
        pi.add_scalar_mut(worst);
    }
    let (mut phi, mut n) = eval(&pi)?;
    for _ in 0..500 {
        let mut g = DVector::from_column_slice(&l.b);
        let mut h = DMatrix::zeros(ne, ne);
        for j in 0..nr {
            for e in 0..ne {
                g[e] -= l.beta[(j, e)] * n[j];
                for f in 0..ne {
                    h[(e, f)] += l.beta[(j, e)] * l.beta[(j, f)] * n[j];
                }
            }
        }
        // the log-form Newton polish finishes the job
        if g.amax() <= 1e-10 * scale {
            return Some((pi, n.iter().sum()));
        }
        for e in 0..ne {
            h[(e, e)] += 1e-14 * scale;
        }
        let d = h.cholesky().map(|c| c.solve(&(-&g))).unwrap_or_else(|| -&g);
        let slope = g.dot(&d);
        if d.amax() <= 1e-15 * pi.amax().max(1.0) {
            return Some((pi, n.iter().sum()));
        }
        let mut t: f64 = 1.0;
        let mut moved = false;
        while t > 1e-16 {
            let trial = &pi + &d * t;
            if trial == pi {
                break;
            }
            if let Some((p2, n2)) = eval(&trial) {
                if p2 <= phi + 1e-4 * t * slope {
                    pi = trial;
                    phi = p2;
                    n = n2;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            // converged to roundoff
            return Some((pi, n.iter().sum()));
        }
    }
    None
}

/// Globally convergent start: bisection on `ln F` between atom-count bounds,
/// each step solving the convex element-balance problem.
fn nested_start(l: &Layout, a: &[f64]) -> Result<DVector<f64>, EquilibriumError> {
    let ne = l.b.len();
    let nr = l.reactive.len();
    let atoms: Vec<f64> = (0..nr).map(|j| (0..ne).map(|e| l.beta[(j, e)]).sum()).collect();
    let max_atoms = atoms.iter().cloned().fold(0.0, f64::max);
    let min_atoms = atoms.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum_b: f64 = l.b.iter().sum();
    let mut lo = (l.n_inert + sum_b / max_atoms).ln();
    let mut hi = (l.n_inert + sum_b / min_atoms).ln();
    let mut pi = equal_share_potentials(l, a);
    let fail = EquilibriumError::NoConvergence { residual: f64::INFINITY };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (p, reactive_total) = element_balance_at(l, a, mid, pi.clone()).ok_or(fail.clone())?;
        pi = p;
        // total implied by the species minus the assumed total
        if reactive_total + l.n_inert > mid.exp() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * mid.abs().max(1.0) {
            break;
        }
    }
    let nu = 0.5 * (lo + hi);
    let mut u = DVector::zeros(ne + 1);
    u.rows_mut(0, ne).copy_from(&pi);
    u[ne] = nu;
    Ok(u)
}

/// Isothermal, isobaric equilibrium of `feed` (mol/s per species).
pub fn equilibrium_tp(
    cfg: &ThermoConfig,
    t: f64,
    p: f64,
    feed: &[f64],
    guess: Option<&[f64]>,
) -> Result<(ReactorState, Guess), EquilibriumError> {
    if !(t > 0.0 && p > 0.0) {
        return Err(EquilibriumError::Invalid(format!("T = {t}, P = {p}")));
    }
    let l = layout(cfg, feed)?;
    let ne = l.b.len();
    let rt = R_GAS * t;
    let a: Vec<f64> = l.reactive.iter().map(|&j| -cfg.gibbs_pure(j, t, p) / rt).collect();
    let total_feed: f64 = feed.iter().sum();

    let start = match guess {
        Some(g) if g.len() == ne + 1 => DVector::from_column_slice(g),
        _ => {
            let mut u = DVector::zeros(ne + 1);
            u.rows_mut(0, ne).copy_from(&equal_share_potentials(&l, &a));
            u[ne] = total_feed.ln();
            u
        }
    };
    let (u, cur) = match newton(&l, &a, start) {
        Ok(v) => v,
        Err(_) => newton(&l, &a, nested_start(&l, &a)?)?,
    };
    let total = u[ne].exp();
    let mut x = vec![0.0; cfg.len()];
    for (jj, &j) in l.reactive.iter().enumerate() {
        x[j] = cur.lnx[jj].exp();
    }
    for &i in &l.inert {
        x[i] = feed[i] / total;
    }
    // outputs satisfy the closure to roundoff; renormalize the tail
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    let partial_gibbs = (0..cfg.len()).map(|j| cfg.partial_gibbs(j, t, p, x[j]).unwrap_or(f64::NAN)).collect();
    let state = ReactorState {
        temperature: t,
        pressure: p,
        total_flow: total,
        x,
        multipliers: (0..ne).map(|e| u[e] * rt).collect(),
        partial_gibbs,
    };
    Ok((state, u.iter().copied().collect()))
}

/// Adiabatic equilibrium: the outlet temperature balances inlet enthalpy
/// `h_in` (W). The bracket is searched by safeguarded regula falsi.
pub fn equilibrium_hp(
    cfg: &ThermoConfig,
    h_in: f64,
    p: f64,
    feed: &[f64],
    bracket: (f64, f64),
) -> Result<ReactorState, EquilibriumError> {
    let mut guess: Option<Guess> = None;
    let eval = |t: f64, guess: &mut Option<Guess>| -> Result<(f64, ReactorState), EquilibriumError> {
        let (s, g) = match equilibrium_tp(cfg, t, p, feed, guess.as_deref()) {
            Ok(v) => v,
            Err(_) => equilibrium_tp(cfg, t, p, feed, None)?,
        };
        *guess = Some(g);
        let h: f64 = (0..cfg.len()).map(|j| s.x[j] * s.total_flow * cfg.enthalpy(j, t)).sum();
        Ok((h - h_in, s))
    };
    let (mut lo, mut hi) = bracket;
    let (mut flo, _) = eval(lo, &mut guess)?;
    let (mut fhi, mut shi) = eval(hi, &mut guess)?;
    if flo > 0.0 || fhi < 0.0 {
        return Err(EquilibriumError::NoTemperature { lo, hi });
    }
    // Illinois variant; outlet enthalpy increases with T
    let mut side = 0i8;
    for _ in 0..200 {
        let mut t = hi - fhi * (hi - lo) / (fhi - flo);
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let (ft, st) = eval(t, &mut guess)?;
        if ft.abs() <= 1e-9 * h_in.abs().max(1.0) || (hi - lo) <= 1e-12 * t {
            return Ok(st);
        }
        if ft < 0.0 {
            lo = t;
            flo = ft;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = t;
            fhi = ft;
            shi = st;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(shi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(cfg: &ThermoConfig, pairs: &[(&str, f64)]) -> Vec<f64> {
        let mut f = vec![0.0; cfg.len()];
        for (n, v) in pairs {
            f[cfg.index(n).unwrap()] = *v;
        }
        f
    }

    #[test]
    fn steam_reforming_conserves_elements() {
        let cfg = ThermoConfig::default();
        let fd = feed(&cfg, &[("CH4", 1.0), ("H2O", 2.0), ("N2", 0.5)]);
        for t in [700.0, 1000.0, 1300.0] {
            let (s, _) = equilibrium_tp(&cfg, t, 3e5, &fd, None).unwrap();
            let r = gibbs_residuals(&s, &fd, 0.0, &cfg).unwrap();
            let n = cfg.reactive_species().len();
            for v in &r[..n] {
                assert!(v.abs() < 1e-6, "stationarity {v}");
            }
            for v in &r[n..r.len() - 1] {
                assert!(v.abs() < 1e-10, "balance {v}");
            }
        }
    }

    #[test]
    fn higher_temperature_converts_more_methane() {
        let cfg = ThermoConfig::default();
        let fd = feed(&cfg, &[("CH4", 1.0), ("H2O", 1.5)]);
        let ch4 = cfg.index("CH4").unwrap();
        let mut last = f64::INFINITY;
        for t in [800.0, 900.0, 1000.0, 1100.0] {
            let (s, _) = equilibrium_tp(&cfg, t, 2e5, &fd, None).unwrap();
            let out = s.x[ch4] * s.total_flow;
            assert!(out < last);
            last = out;
        }
    }

    #[test]
    fn combustion_limit_converges() {
        let cfg = ThermoConfig::default();
        let fd = feed(&cfg, &[("CH4", 1.0), ("H2O", 0.5), ("O2", 0.5), ("N2", 1.9)]);
        for t in [300.0, 400.0, 600.0, 900.0, 1500.0, 3000.0] {
            let (s, _) = equilibrium_tp(&cfg, t, 3e5, &fd, None).unwrap();
            assert!((s.x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_element_is_reported() {
        let cfg = ThermoConfig::default();
        let fd = feed(&cfg, &[("H2O", 1.0)]);
        assert_eq!(equilibrium_tp(&cfg, 900.0, 1e5, &fd, None).unwrap_err(), EquilibriumError::MissingElement("C".into()));
    }

    #[test]
    fn adiabatic_balance() {
        let cfg = ThermoConfig::default();
        let fd = feed(&cfg, &[("CH4", 1.0), ("H2O", 0.5), ("O2", 0.5), ("N2", 1.9)]);
        let h_in: f64 = (0..cfg.len()).map(|j| fd[j] * cfg.enthalpy(j, 800.0)).sum();
        let s = equilibrium_hp(&cfg, h_in, 3e5, &fd, (300.0, 3000.0)).unwrap();
        let r = gibbs_residuals(&s, &fd, h_in, &cfg).unwrap();
        assert!(r.last().unwrap().abs() <= 1e-6 * h_in.abs());
        assert!(s.temperature > 800.0);
    }
}
