//! Tabular and Markdown outputs of a sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::svg::{convergence_svg, incidence_svg};
use super::{reactor_incidence, InstanceResult, Quality, SweepConfig, SweepError, SweepResult};
use crate::model::Formulation;
use crate::nlp::Status;

pub const CSV_HEADER: [&str; 12] = [
    "formulation",
    "pressure",
    "conversion",
    "status",
    "iterations",
    "solve_time_s",
    "objective",
    "F_G",
    "F_s",
    "alpha",
    "quality_rel_err",
    "out_of_bounds",
];

fn quality_cell(q: &Quality) -> String {
    match q {
        Quality::Undefined => String::new(),
        Quality::Error(e) => e.to_string(),
        Quality::ResimulationFailed(_) => "resim_failed".into(),
    }
}

fn row(r: &InstanceResult) -> [String; 12] {
    [
        r.formulation.short_name().to_string(),
        r.pressure.to_string(),
        r.conversion.to_string(),
        r.status.as_str().to_string(),
        r.iterations.to_string(),
        r.solve_time_s.to_string(),
        r.objective.to_string(),
        r.inputs.gas_flow.to_string(),
        r.inputs.steam_flow.to_string(),
        r.inputs.bypass.to_string(),
        quality_cell(&r.quality),
        r.out_of_bounds.to_string(),
    ]
}

/// One row per (formulation, instance) in record order. Floats use the
/// shortest round-trip representation.
pub fn results_csv(result: &SweepResult) -> Result<String, SweepError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &result.records {
        w.write_record(row(r))?;
    }
    let bytes = w.into_inner().map_err(|e| SweepError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Instances `(pressure index, conversion index)` on which every formulation
/// of the sweep reached `Optimal`.
pub fn intersection(result: &SweepResult) -> Vec<(usize, usize)> {
    let g = &result.grid;
    let mut out = Vec::new();
    for pi in 0..g.pressures.len() {
        for ci in 0..g.conversions.len() {
            let ok = g
                .formulations
                .iter()
                .all(|&f| result.record(f, pi, ci).is_some_and(|r| r.status == Status::Optimal));
            if ok {
                out.push((pi, ci));
            }
        }
    }
    out
}

/// Mean, population standard deviation and coefficient of variation (%).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
}

impl Moments {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let cv = if mean != 0.0 { 100.0 * std / mean } else { f64::NAN };
        Some(Moments { mean, std, cv })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FormulationStats {
    pub formulation: Formulation,
    pub variables: Option<usize>,
    pub constraints: Option<usize>,
    /// Count per status, in taxonomy order.
    pub status_counts: Vec<(Status, usize)>,
    /// Over the intersection of successful instances.
    pub iterations: Option<Moments>,
    pub time: Option<Moments>,
    /// Mean and max relative objective error where defined.
    pub quality: Option<(f64, f64)>,
    pub quality_n: usize,
    pub resimulation_failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub intersection: Vec<(usize, usize)>,
    pub formulations: Vec<FormulationStats>,
}

impl Summary {
    pub fn of(result: &SweepResult) -> Self {
        let common = intersection(result);
        let formulations = result
            .grid
            .formulations
            .iter()
            .map(|&f| {
                let stats = result.statistics.get(&f);
                let on_common: Vec<&InstanceResult> =
                    common.iter().filter_map(|&(pi, ci)| result.record(f, pi, ci)).collect();
                let iters: Vec<f64> = on_common.iter().map(|r| r.iterations as f64).collect();
                let times: Vec<f64> = on_common.iter().map(|r| r.solve_time_s).collect();
                let q: Vec<f64> = result.records_for(f).filter_map(|r| r.quality.value()).collect();
                let quality = (!q.is_empty())
                    .then(|| (q.iter().sum::<f64>() / q.len() as f64, q.iter().copied().fold(0.0, f64::max)));
                FormulationStats {
                    formulation: f,
                    variables: stats.map(|s| s.variables),
                    constraints: stats.map(|s| s.constraints),
                    status_counts: Status::ALL
                        .iter()
                        .map(|&s| (s, result.records_for(f).filter(|r| r.status == s).count()))
                        .collect(),
                    iterations: Moments::of(&iters),
                    time: Moments::of(&times),
                    quality,
                    quality_n: q.len(),
                    resimulation_failures: result
                        .records_for(f)
                        .filter(|r| matches!(r.quality, Quality::ResimulationFailed(_)))
                        .count(),
                }
            })
            .collect();
        Summary { intersection: common, formulations }
    }

    pub fn get(&self, f: Formulation) -> Option<&FormulationStats> {
        self.formulations.iter().find(|s| s.formulation == f)
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn moments(m: Option<Moments>, digits: usize) -> [String; 3] {
    match m {
        Some(m) => [format!("{:.*}", digits, m.mean), format!("{:.*}", digits, m.std), format!("{:.1}", m.cv)],
        None => ["n=0".into(), "n=0".into(), "n=0".into()],
    }
}

/// Per-formulation model sizes, status totals, solve statistics over the
/// intersection of successful instances and decision quality.
pub fn stats_markdown(result: &SweepResult) -> String {
    let s = Summary::of(result);
    let g = &result.grid;
    let mut md = String::new();
    let _ = writeln!(md, "# Sweep statistics\n");
    let _ = writeln!(
        md,
        "{} pressures x {} conversions = {} instances per formulation, seed {}, tolerance {:e}, iteration cap {}.\n",
        g.pressures.len(),
        g.conversions.len(),
        g.instances(),
        g.seed,
        g.solver.tolerance,
        g.solver.max_iterations
    );

    let _ = writeln!(md, "## Convergence\n");
    let names: Vec<&str> = Status::ALL.iter().map(|s| s.as_str()).collect();
    let _ = writeln!(md, "| Formulation | {} | Total |", names.join(" | "));
    let _ = writeln!(md, "|---|{}---|", "---|".repeat(names.len()));
    for f in &s.formulations {
        let counts: Vec<String> = f.status_counts.iter().map(|(_, n)| n.to_string()).collect();
        let total: usize = f.status_counts.iter().map(|(_, n)| n).sum();
        let _ = writeln!(md, "| {} | {} | {} |", f.formulation.short_name(), counts.join(" | "), total);
    }

    let n = s.intersection.len();
    let _ = writeln!(md, "\n## Problem statistics\n");
    let _ = writeln!(md, "Iterations and solve times over the intersection of successful instances (n={n}).\n");
    let _ = writeln!(
        md,
        "| Formulation | Variables | Constraints | n | Iter mean | Iter std | Iter CV (%) | Time mean (s) | Time std (s) | Time CV (%) |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|---|");
    for f in &s.formulations {
        let [im, is, ic] = moments(f.iterations, 1);
        let [tm, ts, tc] = moments(f.time, 4);
        let _ = writeln!(
            md,
            "| {} | {} | {} | {n} | {im} | {is} | {ic} | {tm} | {ts} | {tc} |",
            f.formulation.short_name(),
            opt(f.variables),
            opt(f.constraints)
        );
    }

    let _ = writeln!(md, "\n## Decision quality\n");
    let _ = writeln!(
        md,
        "Relative error of the product hydrogen fraction when each formulation's decisions are re-simulated on the full flowsheet, against the full-space optimum.\n"
    );
    let _ = writeln!(md, "| Formulation | n | Mean | Max | Re-simulation failures |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for f in &s.formulations {
        let (mean, max) = f.quality.map_or(("n=0".into(), "n=0".into()), |(a, b)| (format!("{a:.3e}"), format!("{b:.3e}")));
        let _ = writeln!(md, "| {} | {} | {mean} | {max} | {} |", f.formulation.short_name(), f.quality_n, f.resimulation_failures);
    }

    if !result.surrogates.min_r2.is_empty() {
        let _ = writeln!(md, "\n## Surrogates\n");
        let _ = writeln!(
            md,
            "{} training samples ({} failed simulations).\n",
            result.surrogates.samples, result.surrogates.failed_samples
        );
        for (f, r2) in &result.surrogates.min_r2 {
            let _ = writeln!(md, "- {}: minimum validation R² {r2:.4}", f.short_name());
        }
    }

    let mean_time = |f| s.get(f).and_then(|x| x.time).map(|m| m.mean);
    let cv = |f| s.get(f).and_then(|x| x.time).map(|m| m.cv);
    let full = mean_time(Formulation::FullSpace);
    let mut checks = Vec::new();
    for f in [Formulation::SurrogateAlamo, Formulation::SurrogateNn] {
        if let (Some(a), Some(b)) = (mean_time(f), full) {
            checks.push(format!("{} mean time below full space: {}", f.short_name(), a < b));
        }
    }
    if let (Some(a), Some(b)) = (mean_time(Formulation::Implicit), full) {
        checks.push(format!("implicit mean time above full space: {}", a > b));
    }
    if let Some(c) = cv(Formulation::FullSpace) {
        let others = s.formulations.iter().filter(|x| x.formulation != Formulation::FullSpace).filter_map(|x| x.time);
        checks.push(format!("full space has the highest time CV: {}", others.into_iter().all(|m| !(m.cv > c))));
    }
    if !checks.is_empty() {
        let _ = writeln!(md, "\n## Timing pattern\n");
        for c in checks {
            let _ = writeln!(md, "- {c}");
        }
    }
    let _ = writeln!(md, "\nTotal wall time {:.1} s.", result.total_time_s);
    md
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, SweepError> {
    std::fs::write(&path, contents).map_err(|e| SweepError::io(&path, e))?;
    Ok(path)
}

/// Writes results.csv, convergence_grid.svg, stats.md and incidence.svg into
/// `dir`, creating it if needed.
pub fn emit_reports(result: &SweepResult, cfg: &SweepConfig, dir: &Path) -> Result<Vec<PathBuf>, SweepError> {
    if result.records.is_empty() {
        return Err(SweepError::Empty);
    }
    std::fs::create_dir_all(dir).map_err(|e| SweepError::io(dir, e))?;
    let incidence = reactor_incidence(&cfg.thermo, &cfg.flowsheet)?;
    Ok(vec![
        write(dir.join("results.csv"), &results_csv(result)?)?,
        write(dir.join("convergence_grid.svg"), &convergence_svg(result, cfg.surrogate.ranges.conversion))?,
        write(dir.join("stats.md"), &stats_markdown(result))?,
        write(dir.join("incidence.svg"), &incidence_svg(&incidence))?,
    ])
}
