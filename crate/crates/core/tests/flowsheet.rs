mod common;

use common::{element_totals, oracle_three_species, subset};
use std::collections::BTreeMap;
use std::sync::OnceLock;

use flowopt::flowsheet::equilibrium::{equilibrium_hp, equilibrium_tp, gibbs_residuals, ReactorState};
use flowopt::flowsheet::simulate::simulate_reactor;
use flowopt::flowsheet::thermo::{SpeciesData, R_GAS};
use flowopt::flowsheet::*;
use flowopt::model::{ConstraintKind, Formulation, Tag};
use flowopt::nlp::{kkt_residual, solve, SolveOptions, SolveResult, Status};
use flowopt::sqsolve::BlockSolveOptions;
use flowopt::surrogate::{build_surrogate_flowsheet, sample_dataset, train_mlp, train_poly, MlpConfig, SampleRanges, Surrogate};

fn cfg() -> ThermoConfig {
    ThermoConfig::default()
}

#[test]
fn three_species_equilibrium_matches_extent_bisection() {
    let c = subset(&["CH4", "C2H6", "H2"]);
    c.validate().unwrap();
    let order = ["CH4", "C2H6", "H2"].map(|n| c.index(n).unwrap());
    for t in [500.0, 800.0, 1100.0, 1400.0] {
        for p in [1e5, 5e5] {
            for feed in [[1.0, 1.0, 1.0], [0.2, 2.0, 3.0], [5.0, 0.1, 0.4]] {
                let mut f = vec![0.0; 3];
                for (k, &j) in order.iter().enumerate() {
                    f[j] = feed[k];
                }
                let (s, _) = equilibrium_tp(&c, t, p, &f, None).unwrap();
                let want = oracle_three_species(&c, t, p, feed);
                for (k, &j) in order.iter().enumerate() {
                    assert!((s.x[j] - want[k]).abs() <= 1e-6, "T {t} P {p} {feed:?}: {} vs {}", s.x[j], want[k]);
                }
            }
        }
    }
}

#[test]
fn isomer_pair_with_equal_data_splits_evenly() {
    let mk = |name: &str| SpeciesData {
        name: name.into(),
        elements: BTreeMap::from([("Z".to_string(), 1.0)]),
        cp: [30.0, 0.01, 0.0, 0.0],
        h_form: -5.0e4,
        s_form: 200.0,
    };
    let c = ThermoConfig { species: vec![mk("A"), mk("B")], inert: vec![], p_ref: 101_325.0 };
    c.validate().unwrap();
    let (s, _) = equilibrium_tp(&c, 700.0, 2e5, &[1.0, 0.0], None).unwrap();
    assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12, "{:?}", s.x);
}

fn check_state(c: &ThermoConfig, s: &ReactorState, feed: &[f64]) {
    let (tin, tout) = (element_totals(c, feed), element_totals(c, &s.flows()));
    for (a, b) in tin.iter().zip(&tout) {
        assert!((a - b).abs() <= 1e-8 * a.abs(), "element {a} vs {b}");
    }
    assert!((s.x.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
    assert!(s.x.iter().all(|&v| v >= 0.0));
    let elements = c.elements();
    for j in c.reactive_species() {
        let g = c.partial_gibbs(j, s.temperature, s.pressure, s.x[j]).unwrap();
        let l: f64 = elements.iter().zip(&s.multipliers).map(|(e, l)| l * c.beta(j, e)).sum();
        // dimensionless stationarity, g / RT
        assert!(((g + l) / (R_GAS * s.temperature)).abs() <= 1e-8, "{}: {}", c.species[j].name, g + l);
    }
}

fn reforming_feed(c: &ThermoConfig, steam: f64, air: f64) -> Vec<f64> {
    let mut f = vec![0.0; c.len()];
    let mut add = |n: &str, v: f64| f[c.index(n).unwrap()] += v;
    add("CH4", 0.93);
    add("C2H6", 0.04);
    add("C3H8", 0.01);
    add("CO2", 0.005);
    add("N2", 0.015 + 0.78 * air);
    add("O2", 0.21 * air);
    add("Ar", 0.01 * air);
    add("H2O", steam);
    f
}

#[test]
fn equilibrium_states_conserve_elements_and_are_stationary() {
    let c = cfg();
    for (steam, air) in [(0.3, 0.5), (0.6, 1.2), (1.0, 2.0)] {
        let feed = reforming_feed(&c, steam, air);
        for t in [700.0, 1000.0, 1300.0] {
            let (s, _) = equilibrium_tp(&c, t, 2e5, &feed, None).unwrap();
            check_state(&c, &s, &feed);
        }
        let h_in: f64 = feed.iter().enumerate().map(|(j, n)| n * c.enthalpy(j, 800.0)).sum();
        let s = equilibrium_hp(&c, h_in, 2e5, &feed, (250.0, 4000.0)).unwrap();
        check_state(&c, &s, &feed);
        let r = gibbs_residuals(&s, &feed, h_in, &c).unwrap();
        let n_stat = c.reactive_species().len();
        assert!(r[..n_stat].iter().all(|v| (v / (R_GAS * s.temperature)).abs() <= 1e-8));
        assert!(r[n_stat..r.len() - 1].iter().all(|v| v.abs() <= 1e-10 * feed.iter().sum::<f64>()));
        assert!(r[r.len() - 1].abs() <= 1e-8 * h_in.abs());
    }
}

#[test]
fn perturbed_equilibrium_violates_stationarity() {
    let c = cfg();
    let feed = reforming_feed(&c, 0.6, 1.0);
    let (mut s, _) = equilibrium_tp(&c, 1000.0, 2e5, &feed, None).unwrap();
    let j = c.index("H2").unwrap();
    s.x[j] += 1e-3;
    let r = gibbs_residuals(&s, &feed, 0.0, &c).unwrap();
    let k = c.reactive_species().iter().position(|&i| i == j).unwrap();
    assert!(r[k].abs() > 1.0, "{}", r[k]);
}

#[test]
fn outlet_methane_falls_as_conversion_rises() {
    let (c, p) = (cfg(), FlowsheetParams::default());
    let ch4 = c.index("CH4").unwrap();
    let mut last = f64::INFINITY;
    for x in [0.80, 0.84, 0.88, 0.92, 0.95, 0.97] {
        let (_, s) = simulate_reactor(&c, &p, 275.0, 750.0, 800.0, x).unwrap();
        assert!(s.x[ch4] < last, "X {x}: {} !< {last}", s.x[ch4]);
        last = s.x[ch4];
    }
}

#[test]
fn full_bypass_sends_no_gas_down_the_main_path() {
    let fs = build_flowsheet(&cfg(), &FlowsheetParams::default(), Formulation::FullSpace).unwrap();
    let h = &fs.handles;
    let row = fs.model.constraints().iter().find(|c| c.name == "splitter.main").unwrap();
    let mut pt = fs.model.values();
    pt[h.bypass.0] = 1.0;
    pt[h.gas_flow.0] = 1400.0;
    pt[h.main_flow.0] = 0.0;
    assert_eq!(flowopt::expr::evaluate(&row.residual, &pt).unwrap(), 0.0);
    pt[h.main_flow.0] = 1.0;
    assert!(flowopt::expr::evaluate(&row.residual, &pt).unwrap() != 0.0);
}

fn surrogates() -> &'static (Surrogate, Surrogate) {
    static S: OnceLock<(Surrogate, Surrogate)> = OnceLock::new();
    S.get_or_init(|| {
        let ds = sample_dataset(&cfg(), &FlowsheetParams::default(), 60, &SampleRanges::default(), 1);
        let poly = train_poly(&ds, 4).unwrap();
        let net = train_mlp(&ds, &MlpConfig { epochs: 5, ..MlpConfig::default() }).unwrap().network;
        (Surrogate::Poly(poly), Surrogate::Mlp(net))
    })
}

fn all_formulations(p: &FlowsheetParams) -> Vec<Flowsheet> {
    let (poly, net) = surrogates();
    vec![
        build_flowsheet(&cfg(), p, Formulation::FullSpace).unwrap(),
        build_surrogate_flowsheet(&cfg(), p, poly).unwrap(),
        build_surrogate_flowsheet(&cfg(), p, net).unwrap(),
        build_flowsheet(&cfg(), p, Formulation::Implicit).unwrap(),
    ]
}

#[test]
fn operational_constraints_are_identical_across_formulations() {
    let sheets = all_formulations(&FlowsheetParams::default());
    let ops = |f: &Flowsheet| -> Vec<(String, ConstraintKind, String)> {
        f.model.constraints_with_tag(Tag::Operational).map(|c| (c.name.clone(), c.kind, c.residual.to_string())).collect()
    };
    let reference = ops(&sheets[0]);
    assert_eq!(reference.len(), 4);
    for f in &sheets[1..] {
        assert_eq!(ops(f), reference, "{:?}", f.model.formulation);
        assert_eq!(f.model.objective().to_string(), sheets[0].model.objective().to_string());
    }
}

#[test]
fn model_sizes_follow_formulation_pattern() {
    let sheets = all_formulations(&FlowsheetParams::default());
    let v: Vec<usize> = sheets.iter().map(|f| f.model.statistics().variables).collect();
    let (full, alamo, nn, implicit) = (v[0], v[1], v[2], v[3]);
    assert!(alamo < implicit && implicit < full && full < nn, "{v:?}");
    let block = sheets[3].model.external().unwrap().len();
    assert_eq!(block, 16);
    assert_eq!(full - implicit, block);
    let (sf, si) = (sheets[0].model.statistics(), sheets[3].model.statistics());
    assert_eq!(sf.equalities - si.equalities, block);
    assert_eq!(sf.inequalities, si.inequalities);
}

fn solve_at(f: Formulation, pressure: f64, conversion: f64) -> (Flowsheet, SolveResult) {
    let fs = build_flowsheet(&cfg(), &FlowsheetParams::default().with_operating_point(pressure, conversion), f).unwrap();
    let r = solve(&fs.model, &SolveOptions::default());
    (fs, r)
}

#[test]
fn optimal_points_pass_independent_kkt_check() {
    for f in [Formulation::FullSpace, Formulation::Implicit] {
        let (fs, r) = solve_at(f, 2.5e5, 0.9);
        assert_eq!(r.status, Status::Optimal, "{f:?}");
        let k = kkt_residual(&fs.model, &r.point, &r.multipliers, &BlockSolveOptions::default()).unwrap();
        assert!(k.max() <= 1e-7, "{f:?}: {k:?}");
    }
}

#[test]
fn implicit_and_full_space_optima_agree() {
    for (p, x) in [(1.5e5, 0.83), (3.0e5, 0.9), (4.5e5, 0.95)] {
        let (ff, rf) = solve_at(Formulation::FullSpace, p, x);
        let (fi, ri) = solve_at(Formulation::Implicit, p, x);
        assert_eq!((rf.status, ri.status), (Status::Optimal, Status::Optimal), "P {p} X {x}");
        assert!((rf.objective - ri.objective).abs() <= 1e-6 * rf.objective.abs());
        let (a, b) = (ff.inputs_at(&rf.point), fi.inputs_at(&ri.point));
        for (u, w) in [(a.gas_flow, b.gas_flow), (a.steam_flow, b.steam_flow), (a.bypass, b.bypass)] {
            assert!((u - w).abs() <= 1e-5 * u.abs().max(1e-3), "P {p} X {x}: {u} vs {w}");
        }
    }
}

#[test]
fn square_resimulation_reproduces_full_space_optimum() {
    let (fs, r) = solve_at(Formulation::FullSpace, 2.0e5, 0.9);
    assert_eq!(r.status, Status::Optimal);
    let sq = simulate_square(&cfg(), &fs.params, fs.inputs_at(&r.point), &BlockSolveOptions::default()).unwrap();
    assert!((sq.objective - r.objective).abs() <= 1e-6 * r.objective, "{} vs {}", sq.objective, r.objective);
}

#[test]
fn whole_flowsheet_conserves_elements_at_feasible_points() {
    let (fs, r) = solve_at(Formulation::FullSpace, 3.5e5, 0.86);
    assert_eq!(r.status, Status::Optimal);
    let c = &fs.thermo;
    for inputs in [fs.inputs_at(&r.point), fs.params.nominal] {
        // the square solve closes every equality to its tight tolerance
        let sq = simulate_square(c, &fs.params, inputs, &BlockSolveOptions::default()).unwrap();
        let (h, pt) = (&sq.flowsheet.handles, &sq.point);
        let y_gas = fs.params.composition_vector(c, &fs.params.gas_composition, "gas").unwrap();
        let y_air = fs.params.composition_vector(c, &fs.params.air_composition, "air").unwrap();
        let mut feed: Vec<f64> = (0..c.len()).map(|j| y_gas[j] * pt[h.gas_flow.0] + y_air[j] * pt[h.air_flow.0]).collect();
        feed[c.index("H2O").unwrap()] += pt[h.steam_flow.0];
        let product: Vec<f64> = h.product_x.iter().map(|x| pt[x.0] * pt[h.product_flow.0]).collect();
        for (a, b) in element_totals(c, &feed).iter().zip(element_totals(c, &product)) {
            assert!((a - b).abs() <= 1e-8 * a.abs(), "{a} vs {b}");
        }
    }
}
