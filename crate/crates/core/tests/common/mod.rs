//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use flowopt::expr::{evaluate, Expr};
use flowopt::flowsheet::build::full_space_model;
use flowopt::flowsheet::params::Range;
use flowopt::flowsheet::simulate::sequential_pass;
use flowopt::flowsheet::thermo::{SpeciesData, R_GAS, T_REF};
use flowopt::flowsheet::{FlowsheetParams, Inputs, ThermoConfig};
use flowopt::implicit::ImplicitFunction;
use flowopt::model::{extract_subsystem, Constraint, Formulation, NlpModel, SquareSubsystem, Tag};
use flowopt::sqsolve::{solve_blt, BlockSolveOptions};
use flowopt::surrogate::{encode_mlp, mlp_forward, MlpSurrogate, SampleRanges, INPUT_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn subset(names: &[&str]) -> ThermoConfig {
    let full = ThermoConfig::default();
    ThermoConfig {
        species: full.species.into_iter().filter(|s| names.contains(&s.name.as_str())).collect(),
        inert: vec![],
        p_ref: full.p_ref,
    }
}

// Oracle thermo: enthalpy and entropy integrals by composite Simpson
// quadrature of the heat-capacity polynomial.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 4000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn oracle_g0(s: &SpeciesData, t: f64, p: f64, p_ref: f64) -> f64 {
    let cp = |t: f64| s.cp[0] + s.cp[1] * t + s.cp[2] * t * t + s.cp[3] * t * t * t;
    let h = s.h_form + simpson(cp, T_REF, t);
    let entropy = s.s_form + simpson(|t| cp(t) / t, T_REF, t) - R_GAS * (p / p_ref).ln();
    h - t * entropy
}

/// Minimizes total Gibbs energy of C2H6 + H2 <-> 2 CH4 over the extent by
/// bisection on dG/d(extent); total moles are invariant.
pub fn oracle_three_species(c: &ThermoConfig, t: f64, p: f64, feed: [f64; 3]) -> [f64; 3] {
    let idx = |n: &str| c.index(n).unwrap();
    let (ch4, c2h6, h2) = (idx("CH4"), idx("C2H6"), idx("H2"));
    let g0 = |j: usize| oracle_g0(&c.species[j], t, p, c.p_ref);
    let (g_ch4, g_c2h6, g_h2) = (g0(ch4), g0(c2h6), g0(h2));
    let total: f64 = feed.iter().sum();
    let n = |xi: f64| [feed[0] + 2.0 * xi, feed[1] - xi, feed[2] - xi];
    let dg = |xi: f64| {
        let m = n(xi);
        let mu = |g: f64, nj: f64| g + R_GAS * t * (nj / total).ln();
        2.0 * mu(g_ch4, m[0]) - mu(g_c2h6, m[1]) - mu(g_h2, m[2])
    };
    let (mut lo, mut hi) = (-feed[0] / 2.0, feed[1].min(feed[2]));
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if dg(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = n(0.5 * (lo + hi));
    [m[0] / total, m[1] / total, m[2] / total]
}

pub fn element_totals(c: &ThermoConfig, flows: &[f64]) -> Vec<f64> {
    c.elements().iter().map(|e| flows.iter().enumerate().map(|(j, n)| c.beta(j, e) * n).sum()).collect()
}

// Oracle: left-to-right accumulation of c * x^p from 0.0 with x^p as
// repeated multiplication, evaluated outside this crate.
pub const GOLDEN_POINTS: [[f64; 4]; 5] = [
    [200.0, 700.0, 1120.0, 0.80],
    [250.0, 650.0, 1150.0, 0.85],
    [300.0, 800.0, 1200.0, 0.90],
    [350.0, 750.0, 1225.0, 0.93],
    [400.0, 900.0, 1250.0, 0.95],
];
#[rustfmt::skip]
pub const GOLDEN_VALUES: [[f64; 13]; 5] = [
    [1220.27584, 4136.8096, 0.45926400000000006, 0.19771008, 0.0004543999999999382, 0.0018479999999999608, 0.045979999999999965, 1.663999999999998e-06, 4.399999999999998e-11, 0.00267776, 0.262888, 1.456e-20, 0.0031315199999999996],
    [1262.21860625, 4312.7060249999995, 0.4706637500000001, 0.1941799999999999, 0.006912500000000016, 0.0024749999999999217, 0.034725000000000006, 1.4627500000000005e-06, 3.05e-11, 0.0026352499999999996, 0.251325, 1.495e-20, 0.002989249999999999],
    [1328.91205, 4527.2289, 0.4740299999999999, 0.18488999999999994, 0.017999999999999933, 0.004299999999999943, 0.024249999999999994, 1.3260000000000022e-06, 1.6999999999999993e-11, 0.002736, 0.2401000000000002, 1.56e-20, 0.0028519999999999995],
    [1361.6127264000002, 4669.516581, 0.4751473275000001, 0.17683103624999985, 0.028392187500000082, 0.007376249999999973, 0.01796500000000001, 1.2362979999999982e-06, 8.89999999999999e-12, 0.0026718124999999997, 0.23196875000000006, 1.5925e-20, 0.0027525625],
    [1388.74756875, 4797.990225, 0.47159125, 0.16569499999999993, 0.040687500000000015, 0.011624999999999996, 0.013850000000000029, 1.1782499999999984e-06, 3.499999999999988e-12, 0.00261125, 0.225275, 1.625e-20, 0.002671250000000001],
];

/// Reactor-block inputs and the full model point at a random feasible
/// operating point, obtained by a sequential pass.
pub fn random_points(n: usize, seed: u64) -> Vec<(ImplicitFunction, Vec<f64>)> {
    let cfg = ThermoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let p = FlowsheetParams::default().with_operating_point(rng.random_range(1.5e5..5e5), rng.random_range(0.8..0.97));
        let inputs = Inputs {
            gas_flow: rng.random_range(p.gas_flow.lower..p.gas_flow.upper),
            steam_flow: rng.random_range(p.steam_flow.lower..p.steam_flow.upper),
            bypass: rng.random_range(0.2..0.5),
        };
        let Ok(state) = sequential_pass(&cfg, &p, inputs) else { continue };
        let (model, _) = full_space_model(&cfg, &p, &state).unwrap();
        let sub = extract_subsystem(&model, Tag::Reactor).unwrap();
        let point = model.values();
        let u: Vec<f64> = sub.inputs.iter().map(|v| point[v.0]).collect();
        out.push((ImplicitFunction::new(sub, BlockSolveOptions::default(), &point).unwrap(), u));
    }
    out
}


/// Entries of the implicit output Jacobian at `u` that disagree with
/// central differences of the outputs by more than 1e-5 relative.
pub fn jacobian_fd_mismatches(f: &mut ImplicitFunction, u: &[f64]) -> Vec<String> {
    let y0 = f.eval_outputs(u).unwrap();
    let jac = f.jacobian_outputs(u).unwrap();
    assert_eq!(jac.shape(), (y0.len(), u.len()));
    let mut bad = Vec::new();
    for k in 0..u.len() {
        // truncation error is O(h^2); smaller steps amplify inner-solve roundoff
        let h = 1e-4 * u[k].abs().max(1.0);
        let (mut up, mut dn) = (u.to_vec(), u.to_vec());
        up[k] += h;
        dn[k] -= h;
        let (yp, yd) = (f.eval_outputs(&up).unwrap(), f.eval_outputs(&dn).unwrap());
        for i in 0..y0.len() {
            let fd = (yp[i] - yd[i]) / (2.0 * h);
            // entries are compared relative to themselves, with a floor at
            // the output's own magnitude per unit input
            let scale = fd.abs().max(1e-6 * y0[i].abs().max(1e-12) / u[k].abs().max(1.0));
            if (jac[(i, k)] - fd).abs() > 1e-5 * scale {
                bad.push(format!("d{i}/d{k}: {} vs {fd}", jac[(i, k)]));
            }
        }
    }
    bad
}

/// Largest relative deviation between the encoded network, solved as a
/// square system at `n` random in-bounds inputs, and the forward pass.
pub fn mlp_encoding_worst_deviation(net: &MlpSurrogate, n: usize, seed: u64) -> f64 {
    let ranges = SampleRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NlpModel::new(Formulation::SurrogateNn);
    let inputs: Vec<_> = INPUT_NAMES.iter().map(|n| model.add_param(n, 0.0)).collect();
    let mid = ranges.midpoint();
    let in_exprs: Vec<Expr> = inputs.iter().map(|&v| Expr::var(v)).collect();
    // auxiliary values start at the box midpoint, not at the solution
    let enc = encode_mlp(net, &mut model, &in_exprs, &mid, "nn");
    let eqs: Vec<Constraint> = model.constraints_with_tag(Tag::Surrogate).cloned().collect();
    assert_eq!(eqs.len(), enc.variables.len());
    let sub = SquareSubsystem::new(eqs, enc.variables.clone(), |v| model.var(v).name.clone()).unwrap();
    let start = model.values();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let x: Vec<f64> = ranges.as_array().iter().map(|r: &Range| rng.random_range(r.lower..r.upper)).collect();
        let mut point = start.clone();
        for (v, xi) in inputs.iter().zip(&x) {
            point[v.0] = *xi;
        }
        let report = solve_blt(&sub, &mut point, &BlockSolveOptions::default()).unwrap();
        if !report.converged() {
            return f64::INFINITY;
        }
        let want = mlp_forward(net, &x);
        for (e, w) in enc.outputs.iter().zip(&want) {
            let got = evaluate(e, &point).unwrap();
            worst = worst.max((got - w).abs() / w.abs().max(1.0));
        }
    }
    worst
}
