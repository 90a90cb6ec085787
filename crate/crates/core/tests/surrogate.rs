mod common;

use common::{mlp_encoding_worst_deviation, GOLDEN_POINTS, GOLDEN_VALUES};
use std::sync::OnceLock;

use flowopt::expr::{evaluate, Expr};
use flowopt::flowsheet::{FlowsheetParams, ThermoConfig};
use flowopt::model::{Formulation, NlpModel, Variable};
use flowopt::surrogate::dataset::reactor_outputs;
use flowopt::surrogate::mlp::Layer;
use flowopt::surrogate::poly::PolyOutput;
use flowopt::surrogate::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| sample_dataset(&ThermoConfig::default(), &FlowsheetParams::default(), 600, &SampleRanges::default(), 7))
}

fn mlp() -> &'static MlpTraining {
    static NET: OnceLock<MlpTraining> = OnceLock::new();
    NET.get_or_init(|| train_mlp(dataset(), &MlpConfig::default()).expect("training succeeds"))
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn reference_surrogate_matches_golden_values_exactly() {
    let s = reference_surrogate();
    assert_eq!(s.outputs.len(), 13);
    for (x, want) in GOLDEN_POINTS.iter().zip(&GOLDEN_VALUES) {
        let got = eval_poly(&s, x);
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            assert_eq!(g.to_bits(), w.to_bits(), "output {} at {x:?}: {g:e} vs {w:e}", s.outputs[k].name);
        }
    }
}

#[test]
fn reference_surrogate_expressions_agree_with_evaluation() {
    let s = reference_surrogate();
    let inputs: Vec<Expr> = (0..4).map(|i| Expr::var(flowopt::expr::VarId(i))).collect();
    let exprs = s.exprs(&inputs);
    for x in &GOLDEN_POINTS {
        for (e, v) in exprs.iter().zip(eval_poly(&s, x)) {
            let got = evaluate(e, x).unwrap();
            assert!((got - v).abs() <= 1e-12 * v.abs().max(1e-300), "{got} vs {v}");
        }
    }
}

fn synthetic(f: impl Fn(f64) -> f64, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-2.0..2.0);
            (vec![x, 0.0, 0.0, 0.0], vec![f(x)])
        })
        .collect();
    Dataset::from_rows(names(&INPUT_NAMES), names(&["y"]), rows, seed).unwrap()
}

#[test]
fn poly_training_recovers_exact_quadratic() {
    let ds = synthetic(|x| 2.0 * x * x, 50, 3);
    let s = train_poly(&ds, 5).unwrap();
    let terms = &s.outputs[0].terms;
    assert_eq!(terms.len(), 1, "{terms:?}");
    assert_eq!(terms[0].0, Term::new(0, 2));
    assert!((terms[0].1 - 2.0).abs() < 1e-10);
}

#[test]
fn constant_column_gets_constant_fit() {
    let ds = synthetic(|_| 4.5, 20, 1);
    let s = train_poly(&ds, 5).unwrap();
    assert_eq!(s.outputs[0].terms, vec![(Term::CONSTANT, 4.5)]);
    assert!(matches!(r_squared(&s, &ds, Split::Validation), Err(SurrogateError::DegenerateData(_))));
}

#[test]
fn too_few_rows_is_degenerate() {
    let ds = synthetic(|x| x, 1, 1);
    assert!(matches!(train_poly(&ds, 5), Err(SurrogateError::DegenerateData(_))));
}

#[test]
fn r_squared_of_perfect_and_mean_predictors() {
    let ds = synthetic(|x| 3.0 * x + 1.0, 40, 5);
    let perfect = PolySurrogate::new(
        names(&INPUT_NAMES),
        vec![PolyOutput { name: "y".into(), terms: vec![(Term::CONSTANT, 1.0), (Term::new(0, 1), 3.0)] }],
    );
    assert!((r_squared(&perfect, &ds, Split::All).unwrap()[0] - 1.0).abs() < 1e-12);
    let rows = ds.indices(Split::Validation);
    let mean = rows.iter().map(|&i| ds.outputs[i][0]).sum::<f64>() / rows.len() as f64;
    let flat = PolySurrogate::new(names(&INPUT_NAMES), vec![PolyOutput { name: "y".into(), terms: vec![(Term::CONSTANT, mean)] }]);
    assert!(r_squared(&flat, &ds, Split::Validation).unwrap()[0].abs() < 1e-12);
}

#[test]
fn dataset_has_seeded_eighty_twenty_split() {
    let ds = dataset();
    assert_eq!(ds.len() + ds.failures, 600);
    assert_eq!(ds.failures, 0);
    assert_eq!(ds.indices(Split::Train).len(), 480);
    assert_eq!(ds.indices(Split::Validation).len(), 120);
    let ranges = SampleRanges::default();
    assert!(ds.inputs.iter().all(|x| ranges.contains(x)));
}

#[test]
fn dataset_rows_match_direct_simulation() {
    let cfg = ThermoConfig::default();
    let p = FlowsheetParams::default();
    let one = sample_dataset(&cfg, &p, 1, &SampleRanges::default(), 11);
    assert_eq!(one.len(), 1);
    assert_eq!(one.outputs[0], reactor_outputs(&cfg, &p, &one.inputs[0]).unwrap());
    assert_eq!(one.output_names, surrogate_outputs(&cfg));
}

#[test]
fn dataset_generation_is_seed_deterministic() {
    let cfg = ThermoConfig::default();
    let p = FlowsheetParams::default();
    let a = sample_dataset(&cfg, &p, 8, &SampleRanges::default(), 5);
    let b = sample_dataset(&cfg, &p, 8, &SampleRanges::default(), 5);
    let c = sample_dataset(&cfg, &p, 8, &SampleRanges::default(), 6);
    assert_eq!(a, b);
    assert_ne!(a.inputs, c.inputs);
}

#[test]
fn corner_samples_have_normalized_composition() {
    let cfg = ThermoConfig::default();
    let p = FlowsheetParams::default();
    let r = SampleRanges::default();
    for fs in [r.steam_flow.lower, r.steam_flow.upper] {
        for tr in [r.gas_temperature.lower, r.gas_temperature.upper] {
            for fr in [r.gas_flow.lower, r.gas_flow.upper] {
                let y = reactor_outputs(&cfg, &p, &[fs, tr, fr, r.conversion.lower]).unwrap();
                let total: f64 = y[2..].iter().sum();
                assert!((total - 1.0).abs() < 1e-10, "{total}");
                assert!(y[2..].iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn dataset_csv_round_trips() {
    let ds = dataset();
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let back = Dataset::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.inputs, ds.inputs);
    assert_eq!(back.outputs, ds.outputs);
    assert_eq!(back.train, ds.train);
    assert_eq!(back.output_names, ds.output_names);
}

#[test]
fn dataset_csv_rejects_bad_rows() {
    let good = "format_version,split,F_S,T_ref,F_ref,X,y\n1,train,1,2,3,0.9,5\n";
    assert_eq!(Dataset::read_csv(good.as_bytes()).unwrap().len(), 1);
    let cases = [
        "format_version,split,F_S,T_ref,F_ref,X,y\n2,train,1,2,3,0.9,5\n",
        "format_version,split,F_S,T_ref,F_ref,X,y\n1,test,1,2,3,0.9,5\n",
        "format_version,split,F_S,T_ref,F_ref,X,y\n1,train,1,2,3,NaN,5\n",
        "format_version,split,F_S,T_ref,F_ref,X,y\n1,train,1,2,3,0.9\n",
        "split,format_version,F_S,T_ref,F_ref,X,y\n",
    ];
    for c in cases {
        assert!(Dataset::read_csv(c.as_bytes()).is_err(), "{c}");
    }
}

#[test]
fn surrogates_round_trip_through_json() {
    let poly = Surrogate::Poly(train_poly(dataset(), 6).unwrap());
    let net = Surrogate::Mlp(mlp().network.clone());
    for s in [poly, net] {
        let back = Surrogate::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let x = SampleRanges::default().midpoint();
        assert_eq!(back.predict(&x), s.predict(&x));
    }
}

#[test]
fn surrogate_json_rejects_wrong_version_and_shape() {
    let mut m = MlpSurrogate::new(names(&["a"]), names(&["b"]), vec![Layer::zeros(1, 1)]);
    m.format_version = 99;
    let s = serde_json::to_string(&Surrogate::Mlp(m.clone())).unwrap();
    assert!(matches!(Surrogate::from_json(&s), Err(SurrogateError::Version { found: 99, .. })));
    m.format_version = FORMAT_VERSION;
    m.layers[0].weights.push(1.0);
    let s = serde_json::to_string(&Surrogate::Mlp(m)).unwrap();
    assert!(matches!(Surrogate::from_json(&s), Err(SurrogateError::Malformed(_))));
}

#[test]
fn mlp_learns_identity() {
    let ds = synthetic(|x| x, 200, 9);
    let cfg = MlpConfig { hidden: vec![8], epochs: 300, ..MlpConfig::default() };
    let t = train_mlp(&ds, &cfg).unwrap();
    assert!(r_squared(&t.network, &ds, Split::Validation).unwrap()[0] >= 0.99);
}

#[test]
fn mlp_training_is_seed_deterministic() {
    let ds = synthetic(|x| x.sin(), 60, 2);
    let cfg = MlpConfig { hidden: vec![5, 5], epochs: 20, ..MlpConfig::default() };
    let a = train_mlp(&ds, &cfg).unwrap();
    let b = train_mlp(&ds, &cfg).unwrap();
    assert_eq!(a.network, b.network);
    let c = train_mlp(&ds, &MlpConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.network, c.network);
}

#[test]
fn mlp_divergence_is_reported() {
    let ds = synthetic(|x| x, 40, 4);
    let cfg = MlpConfig { hidden: vec![4], epochs: 50, learning_rate: 1e300, ..MlpConfig::default() };
    assert!(matches!(train_mlp(&ds, &cfg), Err(SurrogateError::NonFinite { .. })));
}

#[test]
fn validation_r_squared_clears_gate_for_both_families() {
    let ds = dataset();
    let poly = train_poly(ds, 6).unwrap();
    for (family, r2) in [("poly", r_squared(&poly, ds, Split::Validation).unwrap()), ("mlp", r_squared(&mlp().network, ds, Split::Validation).unwrap())] {
        for (name, v) in ds.output_names.iter().zip(&r2) {
            assert!(*v >= 0.8, "{family} {name}: {v}");
        }
    }
}

#[test]
fn single_neuron_encoding_adds_two_variables_and_two_rows() {
    let m = MlpSurrogate::new(
        names(&["u"]),
        names(&["y"]),
        vec![Layer { rows: 1, cols: 1, weights: vec![2.0], bias: vec![0.5] }, Layer { rows: 1, cols: 1, weights: vec![3.0], bias: vec![-1.0] }],
    );
    let mut model = NlpModel::new(Formulation::SurrogateNn);
    let u = model.add_var(Variable::new("u", 0.2));
    let enc = encode_mlp(&m, &mut model, &[Expr::var(u)], &[0.2], "nn");
    assert_eq!(enc.variables.len(), 2);
    assert_eq!(enc.constraints.len(), 2);
    assert_eq!(model.constraints().len(), 2);
    assert_eq!(enc.outputs.len(), 1);
    let y = evaluate(&enc.outputs[0], &model.values()).unwrap();
    assert!((y - mlp_forward(&m, &[0.2])[0]).abs() < 1e-15);
}

#[test]
fn encoded_network_solved_as_square_system_reproduces_forward_pass() {
    let worst = mlp_encoding_worst_deviation(&mlp().network, 100, 21);
    assert!(worst <= 1e-9, "worst deviation {worst:e}");
}

#[test]
fn surrogate_model_sizes_bracket_the_full_space_model() {
    let cfg = ThermoConfig::default();
    let p = FlowsheetParams::default();
    let full = flowopt::flowsheet::build_flowsheet(&cfg, &p, Formulation::FullSpace).unwrap();
    let poly = build_surrogate_flowsheet(&cfg, &p, &Surrogate::Poly(train_poly(dataset(), 6).unwrap())).unwrap();
    let nn = build_surrogate_flowsheet(&cfg, &p, &Surrogate::Mlp(mlp().network.clone())).unwrap();
    let (f, a, n) = (full.model.statistics(), poly.model.statistics(), nn.model.statistics());
    assert!(a.variables < f.variables && f.variables < n.variables, "{a:?} {f:?} {n:?}");
    assert_eq!(n.variables - a.variables, 2 * 4 * 30);
    // three manipulated inputs remain free in every formulation
    for s in [f, a, n] {
        assert_eq!(s.variables - s.equalities, 3);
    }
    assert_eq!(poly.model.formulation, Formulation::SurrogateAlamo);
    assert_eq!(nn.model.formulation, Formulation::SurrogateNn);
}

#[test]
fn embedding_rejects_unknown_names() {
    let full = flowopt::flowsheet::build_flowsheet(&ThermoConfig::default(), &FlowsheetParams::default(), Formulation::FullSpace).unwrap();
    // the reference polynomial predicts species this thermo config lacks
    assert!(matches!(embed_surrogate(&full, &Surrogate::Poly(reference_surrogate())), Err(SurrogateError::UnknownOutput(_))));
    let mut p = train_poly(dataset(), 3).unwrap();
    p.input_names[1] = "T_hot".into();
    assert!(matches!(embed_surrogate(&full, &Surrogate::Poly(p.clone())), Err(SurrogateError::UnknownInput(_))));
    p.input_names[1] = "T_ref".into();
    p.outputs.pop();
    assert!(matches!(embed_surrogate(&full, &Surrogate::Poly(p)), Err(SurrogateError::MissingOutput(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn selection_respects_budget_and_improves_monotonically(
        coef in prop::collection::vec(-3.0f64..3.0, 4),
        noise_seed in 0u64..1000,
        budget in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| coef[0] + coef[1] * x[0] + coef[2] * x[1] * x[1] + coef[3] * x[0].powi(3) + 0.01 * rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let sel = select_terms(&Term::basis(2), &rows[..30], &ys[..30], &rows[30..], &ys[30..], budget);
        prop_assert!(sel.terms.len() <= budget);
        prop_assert_eq!(sel.history.len(), sel.terms.len() + 1);
        for w in sel.history.windows(2) {
            prop_assert!(w[1] <= 0.99 * w[0]);
        }
        let mut seen = sel.terms.iter().map(|t| t.0).collect::<Vec<_>>();
        seen.dedup();
        prop_assert_eq!(seen.len(), sel.terms.len());
    }
}
