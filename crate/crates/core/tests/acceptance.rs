//! Acceptance suite. Runs the default sweep once, checks every criterion
//! against it or against independent oracles, and prints one PASS/FAIL line
//! per criterion. Exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{
    element_totals, jacobian_fd_mismatches, mlp_encoding_worst_deviation, oracle_three_species, random_points, subset,
    GOLDEN_POINTS, GOLDEN_VALUES,
};
use flowopt::flowsheet::build::{build_flowsheet, simulate_square};
use flowopt::flowsheet::equilibrium::{equilibrium_hp, equilibrium_tp};
use flowopt::flowsheet::ThermoConfig;
use flowopt::incidence::{block_triangularize, IncidenceGraph};
use flowopt::model::{extract_subsystem, Formulation, Tag};
use flowopt::nlp::{kkt_residual, SolveOptions, Status};
use flowopt::sqsolve::BlockSolveOptions;
use flowopt::surrogate::{eval_poly, reference_surrogate, Surrogate};
use flowopt::sweep::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn implicit_exactness(sweep: &SweepResult) -> Check {
    let (mut n, mut worst_obj, mut worst_in) = (0, 0.0f64, 0.0f64);
    for f in sweep.records_for(Formulation::FullSpace).filter(|r| r.status == Status::Optimal) {
        let Some(i) = sweep.record(Formulation::Implicit, f.pressure_index, f.conversion_index) else { continue };
        if i.status != Status::Optimal {
            continue;
        }
        n += 1;
        worst_obj = worst_obj.max(rel(i.objective, f.objective));
        for (a, b) in [
            (i.inputs.gas_flow, f.inputs.gas_flow),
            (i.inputs.steam_flow, f.inputs.steam_flow),
            (i.inputs.bypass, f.inputs.bypass),
        ] {
            worst_in = worst_in.max(rel(a, b));
        }
    }
    let detail = format!(
        "{n} jointly optimal instances, objective {worst_obj:.1e}, inputs {worst_in:.1e}, sweep {:.0} s",
        sweep.total_time_s
    );
    ensure(n > 0, "no jointly optimal instances")?;
    ensure(worst_obj <= 1e-6 && worst_in <= 1e-5, detail.clone())?;
    ensure(sweep.total_time_s <= 600.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn implicit_jacobian() -> Check {
    let points = random_points(10, 42);
    let mut entries = 0;
    for (mut f, u) in points {
        entries += f.subsystem().outputs.len() * u.len();
        let bad = jacobian_fd_mismatches(&mut f, &u);
        ensure(bad.is_empty(), format!("{} mismatches, first {}", bad.len(), bad.first().cloned().unwrap_or_default()))?;
    }
    Ok(format!("10 points, {entries} entries within 1e-5"))
}

/// BLT invariants checked from the permuted pattern alone: bijective
/// permutations, a zero-free diagonal, no nonzero above the block diagonal
/// and strongly connected diagonal blocks.
fn blt_problems(g: &IncidenceGraph) -> Option<String> {
    let n = g.num_equations();
    let p = match block_triangularize(g) {
        Ok(p) => p,
        Err(e) => return Some(e.to_string()),
    };
    let inverse = |perm: &[usize]| {
        let mut inv = vec![usize::MAX; n];
        for (k, &i) in perm.iter().enumerate() {
            if i >= n || inv[i] != usize::MAX {
                return None;
            }
            inv[i] = k;
        }
        (perm.len() == n).then_some(inv)
    };
    let (Some(rpos), Some(cpos)) = (inverse(&p.row_perm), inverse(&p.col_perm)) else {
        return Some("permutation is not a bijection".into());
    };
    let mut block_of = vec![0; n];
    let mut start = 0;
    for (b, blk) in p.blocks.iter().enumerate() {
        block_of[start..start + blk.size()].fill(b);
        start += blk.size();
    }
    if start != n {
        return Some(format!("blocks cover {start} of {n}"));
    }
    let mut adj = vec![Vec::new(); n];
    for e in 0..n {
        for &v in g.row(e) {
            let (i, j) = (rpos[e], cpos[v]);
            if block_of[j] > block_of[i] {
                return Some(format!("nonzero ({i},{j}) above the block diagonal"));
            }
            if block_of[j] == block_of[i] {
                adj[i].push(j);
            }
        }
    }
    if (0..n).any(|k| !adj[k].contains(&k)) {
        return Some("zero on the permuted diagonal".into());
    }
    let mut start = 0;
    for blk in &p.blocks {
        let range = start..start + blk.size();
        start += blk.size();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut todo = vec![range.start];
            seen[range.start] = true;
            while let Some(k) = todo.pop() {
                for l in range.clone() {
                    let edge = if forward { adj[k].contains(&l) } else { adj[l].contains(&k) };
                    if edge && !seen[l] {
                        seen[l] = true;
                        todo.push(l);
                    }
                }
            }
            range.clone().all(|k| seen[k])
        };
        if !reach(true) || !reach(false) {
            return Some(format!("block at {} is not strongly connected", range.start));
        }
    }
    None
}

fn blt_invariants() -> Check {
    let cfg = ThermoConfig::default();
    let fs = build_flowsheet(&cfg, &Default::default(), Formulation::FullSpace).map_err(|e| e.to_string())?;
    let sub = extract_subsystem(&fs.model, Tag::Reactor).map_err(|e| e.to_string())?;
    if let Some(p) = blt_problems(&sub.incidence()) {
        return Err(format!("reactor subsystem: {p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.random_range(1..60);
        let mut cols: Vec<usize> = (0..n).collect();
        cols.shuffle(&mut rng);
        let density = rng.random_range(0.0..0.15);
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|e| {
                let mut r = vec![cols[e]];
                r.extend((0..n).filter(|_| rng.random::<f64>() < density));
                r
            })
            .collect();
        let g = IncidenceGraph::new(n, rows).map_err(|e| e.to_string())?;
        if let Some(p) = blt_problems(&g) {
            return Err(format!("random pattern {case} (n={n}): {p}"));
        }
    }
    Ok(format!("reactor block ({} equations) and 100 planted patterns", sub.len()))
}

fn gibbs_oracle(sweep: &SweepResult, cfg: &SweepConfig) -> Check {
    let c3 = subset(&["CH4", "C2H6", "H2"]);
    let order = ["CH4", "C2H6", "H2"].map(|n| c3.index(n).unwrap());
    let mut worst = 0.0f64;
    for t in [500.0, 800.0, 1100.0, 1400.0] {
        for p in [1e5, 5e5] {
            for feed in [[1.0, 1.0, 1.0], [0.2, 2.0, 3.0], [5.0, 0.1, 0.4]] {
                let mut f = vec![0.0; 3];
                for (k, &j) in order.iter().enumerate() {
                    f[j] = feed[k];
                }
                let (s, _) = equilibrium_tp(&c3, t, p, &f, None).map_err(|e| e.to_string())?;
                let want = oracle_three_species(&c3, t, p, feed);
                for (k, &j) in order.iter().enumerate() {
                    worst = worst.max((s.x[j] - want[k]).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-6, format!("mole fractions off by {worst:e}"))?;

    let c = &cfg.thermo;
    let mut worst_el = 0.0f64;
    let mut states = 0;
    let mut conserve = |feed: &[f64], out: &[f64]| {
        for (a, b) in element_totals(c, feed).iter().zip(element_totals(c, out)) {
            worst_el = worst_el.max((a - b).abs() / a.abs().max(1e-300));
        }
        states += 1;
    };
    let mut feed = vec![0.0; c.len()];
    for (n, v) in [("CH4", 0.93), ("C2H6", 0.04), ("C3H8", 0.01), ("CO2", 0.005), ("N2", 0.8), ("O2", 0.2), ("Ar", 0.01), ("H2O", 0.6)] {
        feed[c.index(n).unwrap()] = v;
    }
    for t in [700.0, 1000.0, 1300.0] {
        let (s, _) = equilibrium_tp(c, t, 2e5, &feed, None).map_err(|e| e.to_string())?;
        conserve(&feed, &s.flows());
    }
    let h_in: f64 = feed.iter().enumerate().map(|(j, n)| n * c.enthalpy(j, 800.0)).sum();
    let s = equilibrium_hp(c, h_in, 2e5, &feed, (250.0, 4000.0)).map_err(|e| e.to_string())?;
    conserve(&feed, &s.flows());
    // reactor states of the flowsheet at every full-space optimum
    for r in sweep.records_for(Formulation::FullSpace).filter(|r| r.status == Status::Optimal) {
        let params = cfg.flowsheet.with_operating_point(r.pressure, r.conversion);
        let sq = simulate_square(c, &params, r.inputs, &BlockSolveOptions::default()).map_err(|e| e.to_string())?;
        let (h, pt) = (&sq.flowsheet.handles, &sq.point);
        let inlet: Vec<f64> = h.mixer_flows.iter().map(|v| pt[v.0]).collect();
        let outlet: Vec<f64> = h.reactor.x.iter().map(|v| pt[v.0] * pt[h.reactor.flow.0]).collect();
        conserve(&inlet, &outlet);
    }
    ensure(worst_el <= 1e-8, format!("element balance off by {worst_el:e}"))?;
    Ok(format!("oracle within {worst:.1e}, elements within {worst_el:.1e} over {states} states"))
}

fn golden_values() -> Check {
    let s = reference_surrogate();
    ensure(s.outputs.len() == 13, format!("{} outputs", s.outputs.len()))?;
    for (x, want) in GOLDEN_POINTS.iter().zip(&GOLDEN_VALUES) {
        let got = eval_poly(&s, x);
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            ensure(g.to_bits() == w.to_bits(), format!("{} at {x:?}: {g:e} vs {w:e}", s.outputs[k].name))?;
        }
    }
    Ok("13 outputs at 5 points, bit-exact".into())
}

fn validation_gate(sweep: &SweepResult) -> Check {
    let s = &sweep.surrogates;
    ensure(s.samples + s.failed_samples == 600, format!("{} samples", s.samples + s.failed_samples))?;
    let mut parts = Vec::new();
    for f in [Formulation::SurrogateAlamo, Formulation::SurrogateNn] {
        let r2 = *s.min_r2.get(&f).ok_or(format!("{f:?} not trained"))?;
        ensure(r2 >= 0.8, format!("{} minimum validation R² {r2}", f.short_name()))?;
        parts.push(format!("{} min R² {r2:.4}", f.short_name()));
    }
    Ok(parts.join(", "))
}

fn mlp_encoding(sweep: &SweepResult) -> Check {
    let Some(Surrogate::Mlp(net)) = &sweep.surrogates.mlp else { return Err("no network trained".into()) };
    let worst = mlp_encoding_worst_deviation(net, 100, 21);
    ensure(worst <= 1e-9, format!("worst deviation {worst:e}"))?;
    Ok(format!("100 inputs, worst deviation {worst:.1e}"))
}

fn solver_contract(sweep: &SweepResult, cfg: &SweepConfig) -> Check {
    let d = SolveOptions::default();
    ensure(d.tolerance == 1e-7 && d.max_iterations == 300, "defaults changed")?;
    ensure(Status::ALL.iter().all(|s| Status::parse(s.as_str()) == Some(*s)), "status names do not round-trip")?;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for r in sweep.records.iter().filter(|r| r.status == Status::Optimal) {
        let fs = build_instance(cfg, &sweep.surrogates, r.formulation, r.pressure, r.conversion).map_err(|e| e.to_string())?;
        let k = kkt_residual(&fs.model, &r.point, &r.multipliers, &cfg.grid.solver.inner).map_err(|e| e.to_string())?;
        worst = worst.max(k.max());
        ensure(
            k.max() <= 1e-7,
            format!("{} P={} X={}: KKT residual {:e}", r.formulation.short_name(), r.pressure, r.conversion, k.max()),
        )?;
        checked += 1;
    }
    Ok(format!("{checked} optimal results, worst KKT residual {worst:.1e}"))
}

fn failure_mode(cfg: &SweepConfig) -> Check {
    let mut hard = cfg.clone();
    hard.grid.conversions = vec![0.98, 0.99, 0.995, 0.999];
    hard.grid.formulations = vec![Formulation::Implicit];
    hard.grid.solver.fail_hard = true;
    hard.grid.solver.inner.no_clip = true;
    let r = run_sweep_with(&hard, TrainedSurrogates::default()).map_err(|e| e.to_string())?;
    let hits: Vec<&InstanceResult> = r
        .records
        .iter()
        .filter(|x| {
            x.status == Status::EvalError
                && x.failure.as_deref().is_some_and(|m| m.contains("reactor.gibbs") && m.contains("ln evaluated outside its domain"))
        })
        .collect();
    ensure(!hits.is_empty(), "no log-domain evaluation error in the reactor block")?;
    let mut soft = hard.clone();
    soft.grid.solver = SolveOptions::default();
    for h in &hits {
        soft.grid.pressures = vec![h.pressure];
        soft.grid.conversions = vec![h.conversion];
        let d = run_sweep_with(&soft, TrainedSurrogates::default()).map_err(|e| e.to_string())?;
        let st = d.records[0].status;
        ensure(st != Status::EvalError, format!("P={} X={} still fails with defaults", h.pressure, h.conversion))?;
    }
    let h = hits[0];
    Ok(format!(
        "{} instance(s), e.g. P={} X={}: {}; default flags avoid EvalError",
        hits.len(),
        h.pressure,
        h.conversion,
        h.failure.as_deref().unwrap_or_default()
    ))
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    rd.records().map(|r| header.iter().cloned().zip(r.unwrap().iter().map(String::from)).collect()).collect()
}

fn without_timing(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut rows = csv_rows(text);
    for r in &mut rows {
        r.remove("solve_time_s");
    }
    rows
}

fn report_fidelity(sweep: &SweepResult, cfg: &SweepConfig) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    emit_reports(sweep, cfg, dir.path()).map_err(|e| e.to_string())?;
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).map_err(|e| format!("{name}: {e}"));
    let (csv_text, svg, md) = (read("results.csv")?, read("convergence_grid.svg")?, read("stats.md")?);
    read("incidence.svg")?;
    ensure(csv_text.lines().next() == Some(CSV_HEADER.join(",").as_str()), "CSV header differs")?;
    let rows = csv_rows(&csv_text);
    ensure(rows.len() == 4 * 64, format!("{} CSV rows", rows.len()))?;
    ensure(svg.matches("stroke=\"white\"").count() == 4 * 64, "grid cells missing from the SVG")?;

    // recompute the statistics table from the CSV alone
    let mut by_key: BTreeMap<(String, String), Vec<&BTreeMap<String, String>>> = BTreeMap::new();
    for r in &rows {
        by_key.entry((r["pressure"].clone(), r["conversion"].clone())).or_default().push(r);
    }
    let common: Vec<_> = by_key.values().filter(|v| v.len() == 4 && v.iter().all(|r| r["status"] == "Optimal")).collect();
    let n = common.len();
    ensure(md.contains(&format!("(n={n})")), format!("stats.md does not report n={n}"))?;
    for f in ["full", "implicit", "alamo", "nn"] {
        let pick = |col: &str| -> Vec<f64> {
            common.iter().map(|v| v.iter().find(|r| r["formulation"] == f).unwrap()[col].parse().unwrap()).collect()
        };
        let (it, tm) = (pick("iterations"), pick("solve_time_s"));
        let cells = match (Moments::of(&it), Moments::of(&tm)) {
            (Some(i), Some(t)) => format!(
                "| {n} | {:.1} | {:.1} | {:.1} | {:.4} | {:.4} | {:.1} |",
                i.mean, i.std, i.cv, t.mean, t.std, t.cv
            ),
            _ => format!("| {n} | n=0 | n=0 | n=0 | n=0 | n=0 | n=0 |"),
        };
        let line = md.lines().find(|l| l.starts_with(&format!("| {f} |")) && l.contains("| n=") == (n == 0) && l.matches('|').count() == 11);
        ensure(line.is_some_and(|l| l.ends_with(&cells)), format!("stats row for {f} does not match {cells}"))?;
    }

    // two same-seed runs on a sub-grid, against each other and the full run
    let mut sub = cfg.clone();
    sub.grid.pressures = vec![2.0e5, 4.5e5];
    sub.grid.conversions = vec![0.86, 0.99];
    let a = results_csv(&run_sweep(&sub).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b = with_workers(Some(1), || run_sweep(&sub))
        .and_then(|r| r)
        .and_then(|r| results_csv(&r))
        .map_err(|e| e.to_string())?;
    let (ra, rb) = (without_timing(&a), without_timing(&b));
    ensure(ra == rb, "same-seed runs differ outside the timing column")?;
    let full = without_timing(&csv_text);
    let subset_rows: Vec<_> = full
        .into_iter()
        .filter(|r| ["200000", "450000"].contains(&r["pressure"].as_str()) && ["0.86", "0.99"].contains(&r["conversion"].as_str()))
        .collect();
    ensure(subset_rows == ra, "sub-grid rows differ from the full sweep")?;
    Ok(format!("4 reports, stats recomputed over n={n}, {} rows reproduced", ra.len()))
}

fn size_pattern(sweep: &SweepResult, cfg: &SweepConfig) -> Check {
    let v = |f| sweep.statistics.get(&f).map(|s| s.variables).ok_or(format!("{f:?} never built"));
    let (al, im, fu, nn) = (
        v(Formulation::SurrogateAlamo)?,
        v(Formulation::Implicit)?,
        v(Formulation::FullSpace)?,
        v(Formulation::SurrogateNn)?,
    );
    let fs = build_flowsheet(&cfg.thermo, &cfg.flowsheet, Formulation::FullSpace).map_err(|e| e.to_string())?;
    let block = extract_subsystem(&fs.model, Tag::Reactor).map_err(|e| e.to_string())?.len();
    let detail = format!("alamo {al} < implicit {im} < full {fu} < nn {nn}, gap {} = block {block}", fu - im);
    ensure(al < im && im < fu && fu < nn && fu - im == block, detail.clone())?;
    Ok(detail)
}

fn main() {
    println!("acceptance suite: default 8 x 8 sweep over four formulations");
    let cfg = SweepConfig::default();
    let t = Instant::now();
    let sweep = match run_sweep(&cfg) {
        Ok(s) => s,
        Err(e) => {
            println!("sweep failed: {e}");
            std::process::exit(1);
        }
    };
    for f in &cfg.grid.formulations {
        let ok = sweep.records_for(*f).filter(|r| r.status == Status::Optimal).count();
        println!("  {:>8}: {ok}/64 optimal", f.short_name());
    }
    println!("  default sweep finished in {:.1} s", t.elapsed().as_secs_f64());

    let checks: Vec<Criterion> = vec![
        ("implicit exactness", Box::new(|| implicit_exactness(&sweep))),
        ("implicit Jacobian", Box::new(implicit_jacobian)),
        ("BLT invariants", Box::new(blt_invariants)),
        ("Gibbs oracle", Box::new(|| gibbs_oracle(&sweep, &cfg))),
        ("reference polynomial golden values", Box::new(golden_values)),
        ("surrogate validation gate", Box::new(|| validation_gate(&sweep))),
        ("MLP encoding equivalence", Box::new(|| mlp_encoding(&sweep))),
        ("solver contract", Box::new(|| solver_contract(&sweep, &cfg))),
        ("failure-mode reproduction", Box::new(|| failure_mode(&cfg))),
        ("report fidelity", Box::new(|| report_fidelity(&sweep, &cfg))),
        ("model-size pattern", Box::new(|| size_pattern(&sweep, &cfg))),
    ];
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
