//! Barrier method with slack variables for inequalities, a damped BFGS
//! Lagrangian Hessian, and an l1 merit line search.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::problem::{ModelProblem, ProblemError};
use super::{kkt_parts, IterationLog, KktInput, KktResiduals, Multipliers, SolveOptions, SolveResult, Status};
use crate::model::NlpModel;

const KAPPA_SIGMA: f64 = 1e10;
const ARMIJO: f64 = 1e-4;
const MAX_PROBES: usize = 5;
const STALL_WINDOW: usize = 15;
const TINY_STEP: f64 = 1e-9;
const THETA_FLOOR: f64 = 1e-10;
const SHORT_STEP: f64 = 1e-3;
const SHORT_RUN: usize = 5;
const INTERIOR_GAP: f64 = 1e-10;

/// Merit changes below this are rounding noise.
fn noise(phi: f64) -> f64 {
    10.0 * f64::EPSILON * phi.abs().max(1.0)
}

struct Ipm<'a> {
    prob: &'a mut ModelProblem,
    opts: &'a SolveOptions,
    n: usize,
    m: usize,
    /// Constraint row of each slack.
    slack_rows: Vec<usize>,
    lw: DVector<f64>,
    uw: DVector<f64>,
    w: DVector<f64>,
    lam: DVector<f64>,
    zl: DVector<f64>,
    zu: DVector<f64>,
    f: f64,
    c: DVector<f64>,
    grad: DVector<f64>,
    jac: DMatrix<f64>,
    hess: DMatrix<f64>,
    hess_updates: usize,
    mu: f64,
    nu: f64,
    trace: Vec<IterationLog>,
    failure: Option<String>,
}

enum Exit {
    Done(Status),
    Fail(ProblemError),
}

impl<'a> Ipm<'a> {
    fn big_n(&self) -> usize {
        self.n + self.slack_rows.len()
    }

    fn x(&self) -> DVector<f64> {
        self.w.rows(0, self.n).into_owned()
    }

    fn ctilde(&self, c: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut ct = c.clone();
        for (k, &r) in self.slack_rows.iter().enumerate() {
            ct[r] += w[self.n + k];
        }
        ct
    }

    fn jhat(&self) -> DMatrix<f64> {
        let nn = self.big_n();
        let mut j = DMatrix::zeros(self.m, nn);
        j.columns_mut(0, self.n).copy_from(&self.jac);
        for (k, &r) in self.slack_rows.iter().enumerate() {
            j[(r, self.n + k)] = 1.0;
        }
        j
    }

    fn barrier(&self, w: &DVector<f64>, f: f64) -> f64 {
        let mut phi = -f;
        for i in 0..w.len() {
            if self.lw[i].is_finite() {
                phi -= self.mu * (w[i] - self.lw[i]).ln();
            }
            if self.uw[i].is_finite() {
                phi -= self.mu * (self.uw[i] - w[i]).ln();
            }
        }
        phi
    }

    fn barrier_grad(&self) -> DVector<f64> {
        let nn = self.big_n();
        let mut g = DVector::zeros(nn);
        for i in 0..self.n {
            g[i] = -self.grad[i];
        }
        for i in 0..nn {
            if self.lw[i].is_finite() {
                g[i] -= self.mu / (self.w[i] - self.lw[i]);
            }
            if self.uw[i].is_finite() {
                g[i] += self.mu / (self.uw[i] - self.w[i]);
            }
        }
        g
    }

    /// Gradient of `-f + lam' c` with respect to `x`.
    fn lagrangian_grad(&self, grad: &DVector<f64>, jac: &DMatrix<f64>, lam: &DVector<f64>) -> DVector<f64> {
        jac.tr_mul(lam) - grad
    }

    fn dual_residual(&self) -> DVector<f64> {
        let nn = self.big_n();
        let mut r = DVector::zeros(nn);
        let lx = self.lagrangian_grad(&self.grad, &self.jac, &self.lam);
        for i in 0..self.n {
            r[i] = lx[i];
        }
        for (k, &row) in self.slack_rows.iter().enumerate() {
            r[self.n + k] = self.lam[row];
        }
        r - &self.zl + &self.zu
    }

    fn complementarity(&self, mu: f64) -> f64 {
        let mut e = 0.0_f64;
        for i in 0..self.big_n() {
            if self.lw[i].is_finite() {
                e = e.max((self.zl[i] * (self.w[i] - self.lw[i]) - mu).abs());
            }
            if self.uw[i].is_finite() {
                e = e.max((self.zu[i] * (self.uw[i] - self.w[i]) - mu).abs());
            }
        }
        e
    }

    fn model_kkt(&self) -> KktResiduals {
        let x = self.x();
        let lo: Vec<f64> = self.lw.rows(0, self.n).iter().copied().collect();
        let hi: Vec<f64> = self.uw.rows(0, self.n).iter().copied().collect();
        let zl: Vec<f64> = self.zl.rows(0, self.n).iter().copied().collect();
        let zu: Vec<f64> = self.zu.rows(0, self.n).iter().copied().collect();
        kkt_parts(&KktInput {
            grad: &self.grad,
            cons: &self.c,
            jac: &self.jac,
            ineq: self.prob.inequality_mask(),
            lambda: self.lam.as_slice(),
            zl: &zl,
            zu: &zu,
            x: &x,
            lower: &lo,
            upper: &hi,
        })
    }

    fn eval_values(&mut self, w: &DVector<f64>) -> Result<(f64, DVector<f64>), ProblemError> {
        let x = w.rows(0, self.n).into_owned();
        self.prob.eval_values(&x)
    }

    fn eval_derivatives(&mut self) -> Result<(), ProblemError> {
        let x = self.x();
        let (g, j) = self.prob.eval_derivatives(&x)?;
        self.grad = g;
        self.jac = j;
        Ok(())
    }

    /// Least-squares multiplier estimate; zero if it comes out huge.
    fn estimate_multipliers(&mut self) {
        let jh = self.jhat();
        let mut rhs = -(self.barrier_grad_free() - &self.zl + &self.zu);
        rhs = &jh * rhs;
        let mut a = &jh * jh.transpose();
        for i in 0..self.m {
            a[(i, i)] += 1e-8;
        }
        self.lam = match a.cholesky().map(|ch| ch.solve(&rhs)) {
            Some(l) if l.amax() <= 1e3 && l.iter().all(|v| v.is_finite()) => l,
            _ => DVector::zeros(self.m),
        };
    }

    /// Objective gradient over `w` without barrier terms.
    fn barrier_grad_free(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.big_n());
        for i in 0..self.n {
            g[i] = -self.grad[i];
        }
        g
    }

    fn reset_bound_multipliers(&mut self) {
        for i in 0..self.big_n() {
            self.zl[i] = if self.lw[i].is_finite() { self.mu / (self.w[i] - self.lw[i]) } else { 0.0 };
            self.zu[i] = if self.uw[i].is_finite() { self.mu / (self.uw[i] - self.w[i]) } else { 0.0 };
        }
    }

    fn sigma(&self) -> DVector<f64> {
        let nn = self.big_n();
        DVector::from_fn(nn, |i, _| {
            let mut s = 0.0;
            if self.lw[i].is_finite() {
                s += self.zl[i] / (self.w[i] - self.lw[i]);
            }
            if self.uw[i].is_finite() {
                s += self.zu[i] / (self.uw[i] - self.w[i]);
            }
            s
        })
    }

    /// Factorized primal block `H + Sigma + delta I`.
    fn factor_primal(&self, sigma: &DVector<f64>) -> Option<(Cholesky<f64, Dyn>, DMatrix<f64>)> {
        let nn = self.big_n();
        let mut k = DMatrix::zeros(nn, nn);
        k.view_mut((0, 0), (self.n, self.n)).copy_from(&self.hess);
        for i in 0..nn {
            k[(i, i)] += sigma[i];
        }
        let mut delta = 0.0;
        for _ in 0..30 {
            let mut kd = k.clone();
            for i in 0..nn {
                kd[(i, i)] += delta;
            }
            if let Some(ch) = kd.clone().cholesky() {
                return Some((ch, kd));
            }
            delta = if delta == 0.0 { 1e-4 } else { delta * 8.0 };
        }
        None
    }

    /// Newton direction for the barrier KKT system via the Schur complement
    /// on the multipliers. Returns `(dw, dlam, factors)`.
    fn direction(&self, rx: &DVector<f64>, rc: &DVector<f64>, fac: &Factors) -> (DVector<f64>, DVector<f64>) {
        let kinv_rx = fac.k.solve(rx);
        let rhs = rc - &fac.jh * &kinv_rx;
        let dlam = fac.s.solve(&rhs);
        let dw = -fac.k.solve(&(rx + fac.jh.tr_mul(&dlam)));
        (dw, dlam)
    }

    fn factor(&self) -> Option<Factors> {
        let sigma = self.sigma();
        let (k, kmat) = self.factor_primal(&sigma)?;
        let jh = self.jhat();
        let kinv_jt = k.solve(&jh.transpose());
        let s0 = &jh * kinv_jt;
        let mut delta = 0.0;
        for _ in 0..20 {
            let mut s = s0.clone();
            for i in 0..self.m {
                s[(i, i)] += delta;
            }
            if let Some(sc) = s.cholesky() {
                return Some(Factors { k, kmat, jh, s: sc });
            }
            delta = if delta == 0.0 { 1e-10 * (1.0 + s0.diagonal().amax()) } else { delta * 10.0 };
        }
        None
    }

    fn max_step(&self, v: &DVector<f64>, dv: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, tau: f64) -> f64 {
        let mut a = 1.0_f64;
        for i in 0..v.len() {
            if dv[i] < 0.0 && lo[i].is_finite() {
                a = a.min(-tau * (v[i] - lo[i]) / dv[i]);
            }
            if dv[i] > 0.0 && hi[i].is_finite() {
                a = a.min(tau * (hi[i] - v[i]) / dv[i]);
            }
        }
        a.max(0.0)
    }

    fn dual_max_step(&self, z: &DVector<f64>, dz: &DVector<f64>, tau: f64) -> f64 {
        let mut a = 1.0_f64;
        for i in 0..z.len() {
            if dz[i] < 0.0 && z[i] > 0.0 {
                a = a.min(-tau * z[i] / dz[i]);
            }
        }
        a
    }

    fn bfgs_update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let ss = s.norm_squared();
        if ss < 1e-30 {
            return;
        }
        let sy = s.dot(y);
        if self.hess_updates == 0 && sy > 0.0 {
            let scale = (y.norm_squared() / sy).clamp(1e-6, 1e6);
            self.hess = DMatrix::identity(self.n, self.n) * scale;
        }
        let bs = &self.hess * s;
        let sbs = s.dot(&bs);
        if sbs <= 0.0 {
            return;
        }
        let r = if sy >= 0.2 * sbs {
            y.clone()
        } else {
            let theta = 0.8 * sbs / (sbs - sy);
            y * theta + &bs * (1.0 - theta)
        };
        let sr = s.dot(&r);
        if sr <= 1e-16 * ss.sqrt() * r.norm() {
            return;
        }
        self.hess -= &bs * bs.transpose() / sbs;
        self.hess += &r * r.transpose() / sr;
        self.hess_updates += 1;
    }

    /// Levenberg-Marquardt descent on `|c~|^2` inside the bounds. Returns
    /// the final infeasibility.
    fn feasibility_probe(&mut self) -> Result<f64, ProblemError> {
        let tau = 0.99;
        let mut ct = self.ctilde(&self.c, &self.w);
        let mut lm = 1e-4;
        for _ in 0..100 {
            let theta = ct.amax();
            if theta <= 0.1 * self.opts.tolerance {
                break;
            }
            let jh = self.jhat();
            let mut a = &jh * jh.transpose();
            for i in 0..self.m {
                a[(i, i)] += lm * (1.0 + a[(i, i)]);
            }
            let Some(ch) = a.cholesky() else {
                lm *= 10.0;
                continue;
            };
            let d = -jh.tr_mul(&ch.solve(&ct));
            let amax = self.max_step(&self.w, &d, &self.lw, &self.uw, tau);
            if amax * d.amax() < 1e-14 * (1.0 + self.w.amax()) {
                break;
            }
            let wt = &self.w + &d * amax;
            match self.eval_values(&wt) {
                Ok((ft, c)) => {
                    let ctt = self.ctilde(&c, &wt);
                    if ctt.norm_squared() < ct.norm_squared() {
                        self.w = wt;
                        self.f = ft;
                        self.c = c;
                        ct = ctt;
                        self.eval_derivatives()?;
                        lm = (lm / 3.0).max(1e-12);
                        continue;
                    }
                }
                Err(e) if self.opts.fail_hard => return Err(e),
                Err(_) => {}
            }
            lm *= 4.0;
            if lm > 1e12 {
                break;
            }
        }
        Ok(ct.amax())
    }

    fn log(&mut self, iteration: usize, inf_pr: f64, inf_du: f64, alpha: f64) {
        let entry = IterationLog { iteration, objective: self.f, inf_pr, inf_du, mu: self.mu, alpha };
        if self.opts.log_iterations {
            log::debug!(
                "{:4} {:+.8e} {:.2e} {:.2e} mu={:.1e} alpha={:.2e}",
                entry.iteration,
                entry.objective,
                entry.inf_pr,
                entry.inf_du,
                entry.mu,
                entry.alpha
            );
        }
        self.trace.push(entry);
    }

    fn run(&mut self) -> (Exit, usize) {
        let tol = self.opts.tolerance;
        let mu_min = tol / 10.0;
        let mut theta_hist: Vec<f64> = Vec::new();
        let mut probes = 0;
        let mut last_probe = 0;
        let mut short_steps = 0;
        for iter in 0..=self.opts.max_iterations {
            let ct = self.ctilde(&self.c, &self.w);
            let theta = ct.amax();
            let rd = self.dual_residual();
            let e0 = rd.amax().max(theta).max(self.complementarity(0.0));
            let kkt = self.model_kkt();
            if e0 <= tol && kkt.max() <= tol {
                self.log(iter, theta, rd.amax(), 0.0);
                return (Exit::Done(Status::Optimal), iter);
            }
            if iter == self.opts.max_iterations {
                return (Exit::Done(Status::IterationLimit), iter);
            }
            // monotone barrier update
            loop {
                let e_mu = rd.amax().max(theta).max(self.complementarity(self.mu));
                if e_mu <= 10.0 * self.mu && self.mu > mu_min {
                    self.mu = mu_min.max((self.opts.mu_factor * self.mu).min(self.mu.powf(1.5)));
                } else {
                    break;
                }
            }
            let tau = self.opts.tau_min.max(1.0 - self.mu);

            // infeasibility stagnation
            theta_hist.push(theta);
            if iter >= last_probe + STALL_WINDOW
                && probes < MAX_PROBES
                && theta > 10.0 * tol
                && theta > 0.99 * theta_hist[iter - STALL_WINDOW..].iter().copied().fold(f64::INFINITY, f64::min)
            {
                probes += 1;
                last_probe = iter;
                match self.probe_and_restart() {
                    Ok(true) => continue,
                    // nearly feasible and still moving: not evidence of infeasibility
                    Ok(false) if theta <= tol.sqrt() => {
                        self.hess = DMatrix::identity(self.n, self.n);
                        self.hess_updates = 0;
                    }
                    Ok(false) => return (Exit::Done(Status::ConvergedInfeasible), iter),
                    Err(e) => return (Exit::Fail(e), iter),
                }
            }

            let Some(fac) = self.factor() else {
                return (Exit::Done(Status::ConvergedInfeasible), iter);
            };
            let gphi = self.barrier_grad();
            let rx = &gphi + fac.jh.tr_mul(&self.lam);
            let (dw, dlam) = self.direction(&rx, &ct, &fac);
            let nn = self.big_n();
            let mut dzl = DVector::zeros(nn);
            let mut dzu = DVector::zeros(nn);
            for i in 0..nn {
                if self.lw[i].is_finite() {
                    let d = self.w[i] - self.lw[i];
                    dzl[i] = self.mu / d - self.zl[i] - self.zl[i] / d * dw[i];
                }
                if self.uw[i].is_finite() {
                    let d = self.uw[i] - self.w[i];
                    dzu[i] = self.mu / d - self.zu[i] + self.zu[i] / d * dw[i];
                }
            }
            let alpha_max = self.max_step(&self.w, &dw, &self.lw, &self.uw, tau);
            let alpha_z = self.dual_max_step(&self.zl, &dzl, tau).min(self.dual_max_step(&self.zu, &dzu, tau));

            // penalty update keeps dw a descent direction for the merit
            let theta1 = ct.iter().map(|v| v.abs()).sum::<f64>();
            let gd = gphi.dot(&dw);
            let curv = dw.dot(&(&fac.kmat * &dw)).max(0.0);
            // below the evaluation noise floor the ratio is meaningless
            if theta1 > THETA_FLOOR {
                let need = (gd + 0.5 * curv) / (0.9 * theta1);
                if need > self.nu {
                    self.nu = need.max(2.0 * self.nu).max(1e-6);
                }
            }
            let phi0 = self.barrier(&self.w, self.f) + self.nu * theta1;
            let slope = gd - self.nu * theta1;

            let mut alpha = alpha_max;
            let mut accepted: Option<(DVector<f64>, f64, DVector<f64>, f64)> = None;
            let mut any_value = false;
            let mut last_err = None;
            // steps at the evaluation noise floor cannot be judged by the merit
            if dw.amax() <= TINY_STEP * self.w.amax().max(1.0) {
                let mut wt = &self.w + &dw * alpha;
                self.interior(&mut wt);
                if let Ok((ft, c)) = self.eval_values(&wt) {
                    accepted = Some((wt, ft, c, alpha));
                }
            }
            for trial in 0..60 {
                if accepted.is_some() {
                    break;
                }
                let mut wt = &self.w + &dw * alpha;
                self.interior(&mut wt);
                match self.eval_values(&wt) {
                    Ok((ft, c)) => {
                        any_value = true;
                        let ctt = self.ctilde(&c, &wt);
                        let phit = self.barrier(&wt, ft) + self.nu * ctt.iter().map(|v| v.abs()).sum::<f64>();
                        if phit <= phi0 + ARMIJO * alpha * slope + noise(phi0) {
                            accepted = Some((wt, ft, c, alpha));
                            break;
                        }
                        if trial == 0 {
                            if let Some(acc) = self.second_order_correction(&fac, &dw, &ctt, tau, phi0, slope) {
                                accepted = Some(acc);
                                break;
                            }
                        }
                    }
                    Err(e) if self.opts.fail_hard => return (Exit::Fail(e), iter),
                    Err(e) => last_err = Some(e),
                }
                alpha *= 0.5;
                if alpha * dw.amax() < 1e-15 * (1.0 + self.w.amax()) {
                    break;
                }
            }
            let Some((wt, ft, c, alpha)) = accepted else {
                if !any_value {
                    if let Some(e) = last_err {
                        return (Exit::Fail(e), iter);
                    }
                }
                // line search failure: restore feasibility or give up
                if theta > tol && probes < MAX_PROBES {
                    probes += 1;
                    last_probe = iter;
                    match self.probe_and_restart() {
                        Ok(true) => continue,
                        Ok(false) => return (Exit::Done(Status::ConvergedInfeasible), iter),
                        Err(e) => return (Exit::Fail(e), iter),
                    }
                }
                if theta > tol {
                    return (Exit::Done(Status::ConvergedInfeasible), iter);
                }
                // feasible but stuck: restart the curvature model
                self.hess = DMatrix::identity(self.n, self.n);
                self.hess_updates = 0;
                self.log(iter, theta, rd.amax(), 0.0);
                continue;
            };

            // a run of short steps means the curvature model is stale
            short_steps = if alpha < SHORT_STEP { short_steps + 1 } else { 0 };
            let x_old = self.x();
            let lgrad_old_grad = self.grad.clone();
            let jac_old = self.jac.clone();
            self.w = wt;
            self.f = ft;
            self.c = c;
            self.lam += &dlam * alpha;
            self.zl += &dzl * alpha_z;
            self.zu += &dzu * alpha_z;
            self.safeguard_duals();
            if let Err(e) = self.eval_derivatives() {
                return (Exit::Fail(e), iter + 1);
            }
            let s = self.x() - x_old;
            let y = self.lagrangian_grad(&self.grad, &self.jac, &self.lam)
                - self.lagrangian_grad(&lgrad_old_grad, &jac_old, &self.lam);
            self.bfgs_update(&s, &y);
            if short_steps >= SHORT_RUN {
                self.hess = DMatrix::identity(self.n, self.n);
                self.hess_updates = 0;
                short_steps = 0;
            }
            let theta_new = self.ctilde(&self.c, &self.w).amax();
            let inf_du = self.dual_residual().amax();
            self.log(iter + 1, theta_new, inf_du, alpha);
        }
        (Exit::Done(Status::IterationLimit), self.opts.max_iterations)
    }

    /// Up to four cumulative second-order corrections of a rejected full step.
    fn second_order_correction(
        &mut self,
        fac: &Factors,
        dw: &DVector<f64>,
        ct_trial: &DVector<f64>,
        tau: f64,
        phi0: f64,
        slope: f64,
    ) -> Option<(DVector<f64>, f64, DVector<f64>, f64)> {
        let zero = DVector::zeros(self.big_n());
        let mut acc = ct_trial.clone();
        let mut theta_prev = ct_trial.iter().map(|v| v.abs()).sum::<f64>();
        for _ in 0..4 {
            let (dc, _) = self.direction(&zero, &acc, fac);
            let dsoc = dw + &dc;
            let a = self.max_step(&self.w, &dsoc, &self.lw, &self.uw, tau);
            let mut wt = &self.w + &dsoc * a;
            self.interior(&mut wt);
            let (ft, c) = self.eval_values(&wt).ok()?;
            let ctt = self.ctilde(&c, &wt);
            let theta_soc = ctt.iter().map(|v| v.abs()).sum::<f64>();
            let phit = self.barrier(&wt, ft) + self.nu * theta_soc;
            if phit <= phi0 + ARMIJO * a * slope + noise(phi0) {
                return Some((wt, ft, c, a));
            }
            if a < 1.0 || theta_soc > 0.99 * theta_prev {
                return None;
            }
            theta_prev = theta_soc;
            acc += &ctt;
        }
        None
    }

    fn safeguard_duals(&mut self) {
        for i in 0..self.big_n() {
            if self.lw[i].is_finite() {
                let d = self.w[i] - self.lw[i];
                self.zl[i] = self.zl[i].clamp(self.mu / (KAPPA_SIGMA * d), KAPPA_SIGMA * self.mu / d);
            }
            if self.uw[i].is_finite() {
                let d = self.uw[i] - self.w[i];
                self.zu[i] = self.zu[i].clamp(self.mu / (KAPPA_SIGMA * d), KAPPA_SIGMA * self.mu / d);
            }
        }
    }

    /// Runs the feasibility probe; on success resets the quasi-Newton model
    /// and multipliers and returns `true`.
    /// Keeps a minimum distance to every bound so that barrier terms stay
    /// representable. Returns whether `w` moved.
    fn interior(&self, w: &mut DVector<f64>) -> bool {
        let mut moved = false;
        for i in 0..w.len() {
            let (l, u) = (self.lw[i], self.uw[i]);
            let gap_l = INTERIOR_GAP * l.abs().max(1.0);
            let gap_u = INTERIOR_GAP * u.abs().max(1.0);
            if l.is_finite() && u.is_finite() && u - l <= 2.0 * (gap_l + gap_u) {
                continue;
            }
            let mut v = w[i];
            if l.is_finite() {
                v = v.max(l + gap_l);
            }
            if u.is_finite() {
                v = v.min(u - gap_u);
            }
            if v != w[i] {
                w[i] = v;
                moved = true;
            }
        }
        moved
    }

    fn keep_interior(&mut self) -> bool {
        let mut w = self.w.clone();
        let moved = self.interior(&mut w);
        self.w = w;
        moved
    }

    fn probe_and_restart(&mut self) -> Result<bool, ProblemError> {
        let before = self.ctilde(&self.c, &self.w).amax();
        let saved = (self.w.clone(), self.f, self.c.clone());
        let after = self.feasibility_probe()?;
        if after > self.opts.tolerance && after > 0.1 * before {
            // a failed probe leaves the iterate where it was
            (self.w, self.f, self.c) = saved;
            self.eval_derivatives()?;
            return Ok(false);
        }
        // the probe has no barrier, so bound distances may have collapsed
        if self.keep_interior() {
            let (f, c) = self.eval_values(&self.w.clone())?;
            self.f = f;
            self.c = c;
            self.eval_derivatives()?;
        }
        self.hess = DMatrix::identity(self.n, self.n);
        self.hess_updates = 0;
        self.reset_bound_multipliers();
        self.estimate_multipliers();
        Ok(true)
    }
}

struct Factors {
    k: Cholesky<f64, Dyn>,
    kmat: DMatrix<f64>,
    jh: DMatrix<f64>,
    s: Cholesky<f64, Dyn>,
}

/// Moves `x` strictly inside `[l, u]`.
fn push_inside(x: f64, l: f64, u: f64) -> f64 {
    let k = 1e-2;
    let mut pl = if l.is_finite() { k * l.abs().max(1.0) } else { 0.0 };
    let mut pu = if u.is_finite() { k * u.abs().max(1.0) } else { 0.0 };
    if l.is_finite() && u.is_finite() {
        pl = pl.min(k * (u - l));
        pu = pu.min(k * (u - l));
    }
    let mut v = x;
    if l.is_finite() {
        v = v.max(l + pl);
    }
    if u.is_finite() {
        v = v.min(u - pu);
    }
    v
}

pub(super) fn solve(model: &NlpModel, opts: &SolveOptions) -> SolveResult {
    let start = Instant::now();
    let point0 = model.values();
    let fail_result = |e: &ProblemError, point: Vec<f64>| SolveResult {
        status: Status::EvalError,
        iterations: 0,
        wall_time: start.elapsed(),
        objective: f64::NAN,
        point,
        multipliers: Multipliers::default(),
        kkt: KktResiduals { stationarity: f64::INFINITY, feasibility: f64::INFINITY, complementarity: f64::INFINITY },
        trace: Vec::new(),
        failure: Some(e.to_string()),
    };
    let mut prob = match ModelProblem::new(model, opts.inner.clone(), &point0) {
        Ok(p) => p,
        Err(e) => return fail_result(&e, point0),
    };
    let n = prob.num_vars();
    let m = prob.num_constraints();
    let slack_rows: Vec<usize> = (0..m).filter(|&r| prob.inequality_mask()[r]).collect();
    let (lo, hi) = prob.bounds();
    let nn = n + slack_rows.len();
    let lw = DVector::from_fn(nn, |i, _| if i < n { lo[i] } else { 0.0 });
    let uw = DVector::from_fn(nn, |i, _| if i < n { hi[i] } else { f64::INFINITY });
    let x0 = prob.scaled_point(&point0);
    let x0 = DVector::from_fn(n, |i, _| push_inside(x0[i], lo[i], hi[i]));
    let (f0, c0) = match prob.eval_values(&x0) {
        Ok(v) => v,
        Err(e) => return fail_result(&e, prob.full_point().to_vec()),
    };
    let mut w = DVector::zeros(nn);
    w.rows_mut(0, n).copy_from(&x0);
    for (k, &r) in slack_rows.iter().enumerate() {
        w[n + k] = (-c0[r]).max(1e-2);
    }
    let mut ipm = Ipm {
        n,
        m,
        slack_rows,
        lw,
        uw,
        w,
        lam: DVector::zeros(m),
        zl: DVector::zeros(nn),
        zu: DVector::zeros(nn),
        f: f0,
        c: c0,
        grad: DVector::zeros(n),
        jac: DMatrix::zeros(m, n),
        hess: DMatrix::identity(n, n),
        hess_updates: 0,
        mu: opts.initial_mu,
        nu: 1.0,
        trace: Vec::new(),
        failure: None,
        prob: &mut prob,
        opts,
    };
    if let Err(e) = ipm.eval_derivatives() {
        let p = ipm.prob.full_point().to_vec();
        return fail_result(&e, p);
    }
    for i in 0..nn {
        ipm.zl[i] = if ipm.lw[i].is_finite() { 1.0 } else { 0.0 };
        ipm.zu[i] = if ipm.uw[i].is_finite() { 1.0 } else { 0.0 };
    }
    ipm.estimate_multipliers();

    let (exit, iterations) = ipm.run();
    let status = match exit {
        Exit::Done(s) => s,
        Exit::Fail(e) => {
            ipm.failure = Some(e.to_string());
            Status::EvalError
        }
    };
    // resynchronize the full point with the final iterate
    let x = ipm.x();
    if status != Status::EvalError {
        if let Ok((f, c)) = ipm.prob.eval_values(&x) {
            ipm.f = f;
            ipm.c = c;
        }
    }
    let kkt = ipm.model_kkt();
    let multipliers = Multipliers {
        constraints: ipm.lam.iter().copied().collect(),
        lower: ipm.zl.rows(0, n).iter().copied().collect(),
        upper: ipm.zu.rows(0, n).iter().copied().collect(),
    };
    let mut point = ipm.prob.full_point().to_vec();
    if status == Status::EvalError {
        // report the last accepted iterate rather than the failed trial
        for (c, v) in ipm.prob.columns().iter().enumerate() {
            point[v.0] = x[c] / model.var(*v).scale;
        }
    }
    SolveResult {
        status,
        iterations,
        wall_time: start.elapsed(),
        objective: ipm.f,
        point,
        multipliers,
        kkt,
        trace: std::mem::take(&mut ipm.trace),
        failure: ipm.failure.take(),
    }
}
