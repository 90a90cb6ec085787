//! Parameter sweep over inlet pressure and conversion for every formulation,
//! with quality evaluation against the full-space optimum and report
//! emission.

mod report;
mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowsheet::build::{build_flowsheet, full_space_model, simulate_square, BuildError, Flowsheet};
use crate::flowsheet::params::{FlowsheetParams, Inputs};
use crate::flowsheet::simulate::sequential_pass;
use crate::flowsheet::thermo::{ConfigError, ThermoConfig};
use crate::incidence::{incidence_report, IncidenceReport};
use crate::model::{extract_subsystem, Formulation, Statistics, Tag};
use crate::nlp::{solve, Multipliers, OptionsError, SolveOptions, Status};
use crate::sqsolve::BlockSolveOptions;
use crate::surrogate::{
    build_surrogate_flowsheet, r_squared, sample_dataset, train_mlp, train_poly, MlpConfig, SampleRanges, Split,
    Surrogate, SurrogateError,
};

pub use report::{emit_reports, intersection, results_csv, stats_markdown, FormulationStats, Moments, Summary, CSV_HEADER};
pub use svg::{convergence_svg, incidence_svg};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Options(#[from] OptionsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config: {0}")]
    Parse(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no sweep results to report")]
    Empty,
    #[error("worker pool: {0}")]
    Pool(String),
}

impl SweepError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SweepError::Io { path: path.to_path_buf(), source }
    }
}

mod short_names {
    use super::Formulation;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Formulation], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|f| f.short_name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Formulation>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| Formulation::from_short_name(s).ok_or_else(|| D::Error::custom(format!("unknown formulation `{s}`"))))
            .collect()
    }
}

/// Instances of a sweep: the Cartesian product of pressures and conversions,
/// solved once per formulation with the same options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    /// Pa
    pub pressures: Vec<f64>,
    pub conversions: Vec<f64>,
    #[serde(with = "short_names")]
    pub formulations: Vec<Formulation>,
    /// Seeds surrogate sampling and training.
    pub seed: u64,
    pub solver: SolveOptions,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            pressures: (0..8).map(|k| 1.5e5 + 5.0e4 * k as f64).collect(),
            conversions: vec![0.80, 0.83, 0.86, 0.89, 0.92, 0.95, 0.97, 0.99],
            formulations: Formulation::ALL.to_vec(),
            seed: 7,
            solver: SolveOptions::default(),
        }
    }
}

impl SweepGrid {
    pub fn single(pressure: f64, conversion: f64) -> Self {
        SweepGrid { pressures: vec![pressure], conversions: vec![conversion], ..Self::default() }
    }

    pub fn instances(&self) -> usize {
        self.pressures.len() * self.conversions.len()
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if self.pressures.is_empty() || self.conversions.is_empty() || self.formulations.is_empty() {
            return Err(SweepError::Grid("pressures, conversions and formulations must be non-empty".into()));
        }
        if let Some(p) = self.pressures.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(SweepError::Grid(format!("pressure {p} is not positive")));
        }
        if let Some(x) = self.conversions.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(SweepError::Grid(format!("conversion {x} is outside (0, 1)")));
        }
        let mut seen = self.formulations.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.formulations.len() {
            return Err(SweepError::Grid("formulations are repeated".into()));
        }
        self.solver.validate()?;
        Ok(())
    }
}

/// How the surrogates of a sweep are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSettings {
    pub samples: usize,
    pub poly_budget: usize,
    /// Its seed is replaced by the sweep seed.
    pub mlp: MlpConfig,
    pub ranges: SampleRanges,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        SurrogateSettings { samples: 600, poly_budget: 6, mlp: MlpConfig::default(), ranges: SampleRanges::default() }
    }
}

/// Everything a sweep run reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    pub surrogate: SurrogateSettings,
    pub flowsheet: FlowsheetParams,
    pub thermo: ThermoConfig,
}

impl SweepConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SweepError> {
        let cfg: SweepConfig = toml::from_str(s).map_err(|e| SweepError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let s = std::fs::read_to_string(path).map_err(|e| SweepError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        self.grid.validate()?;
        self.thermo.validate()?;
        self.flowsheet.validate(&self.thermo)?;
        if self.surrogate.samples == 0 {
            return Err(SweepError::Grid("surrogate.samples must be positive".into()));
        }
        Ok(())
    }
}

/// Surrogates used by a sweep, with their validation scores.
#[derive(Clone, Debug, Default)]
pub struct TrainedSurrogates {
    pub poly: Option<Surrogate>,
    pub mlp: Option<Surrogate>,
    /// Minimum validation R² over outputs, per trained family.
    pub min_r2: BTreeMap<Formulation, f64>,
    pub samples: usize,
    pub failed_samples: usize,
}

impl TrainedSurrogates {
    pub fn get(&self, f: Formulation) -> Option<&Surrogate> {
        match f {
            Formulation::SurrogateAlamo => self.poly.as_ref(),
            Formulation::SurrogateNn => self.mlp.as_ref(),
            _ => None,
        }
    }
}

/// Samples one dataset and trains the surrogate families the grid needs.
pub fn train_surrogates(cfg: &SweepConfig) -> Result<TrainedSurrogates, SweepError> {
    let wants = |f| cfg.grid.formulations.contains(&f);
    let mut out = TrainedSurrogates::default();
    if !wants(Formulation::SurrogateAlamo) && !wants(Formulation::SurrogateNn) {
        return Ok(out);
    }
    let data = sample_dataset(&cfg.thermo, &cfg.flowsheet, cfg.surrogate.samples, &cfg.surrogate.ranges, cfg.grid.seed);
    out.samples = data.len();
    out.failed_samples = data.failures;
    let min = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
    if wants(Formulation::SurrogateAlamo) {
        let p = train_poly(&data, cfg.surrogate.poly_budget)?;
        out.min_r2.insert(Formulation::SurrogateAlamo, min(r_squared(&p, &data, Split::Validation)?));
        out.poly = Some(Surrogate::Poly(p));
    }
    if wants(Formulation::SurrogateNn) {
        let mlp = MlpConfig { seed: cfg.grid.seed, ..cfg.surrogate.mlp.clone() };
        let t = train_mlp(&data, &mlp)?;
        out.min_r2.insert(Formulation::SurrogateNn, min(r_squared(&t.network, &data, Split::Validation)?));
        out.mlp = Some(Surrogate::Mlp(t.network));
    }
    Ok(out)
}

/// Relative objective error of a formulation's decisions, re-simulated on
/// the original flowsheet, against the full-space optimum.
#[derive(Clone, Debug, PartialEq)]
pub enum Quality {
    /// The formulation or the full space did not reach `Optimal`.
    Undefined,
    Error(f64),
    /// The square re-simulation at the formulation's decisions failed.
    ResimulationFailed(String),
}

impl Quality {
    pub fn value(&self) -> Option<f64> {
        match self {
            Quality::Error(e) => Some(*e),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub formulation: Formulation,
    pub pressure_index: usize,
    pub conversion_index: usize,
    pub pressure: f64,
    pub conversion: f64,
    pub status: Status,
    pub iterations: usize,
    /// Wall time of the solve call alone.
    pub solve_time_s: f64,
    pub objective: f64,
    /// Manipulated inputs at the returned point.
    pub inputs: Inputs,
    /// Evaluation or build failure message, if any.
    pub failure: Option<String>,
    pub quality: Quality,
    /// Conversion lies outside the surrogate training range.
    pub out_of_bounds: bool,
    /// Full model point returned by the solver; empty if the build failed.
    pub point: Vec<f64>,
    pub multipliers: Multipliers,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub grid: SweepGrid,
    /// Ordered by formulation (grid order), pressure index, conversion index.
    pub records: Vec<InstanceResult>,
    /// Model size per formulation, from the first instance that built.
    pub statistics: BTreeMap<Formulation, Statistics>,
    pub surrogates: TrainedSurrogates,
    /// Wall time of the whole run, training included.
    pub total_time_s: f64,
}

impl SweepResult {
    pub fn records_for(&self, f: Formulation) -> impl Iterator<Item = &InstanceResult> {
        self.records.iter().filter(move |r| r.formulation == f)
    }

    pub fn record(&self, f: Formulation, pi: usize, ci: usize) -> Option<&InstanceResult> {
        self.records.iter().find(|r| r.formulation == f && r.pressure_index == pi && r.conversion_index == ci)
    }

    pub fn status_counts(&self, f: Formulation) -> BTreeMap<&'static str, usize> {
        let mut counts: BTreeMap<&'static str, usize> = Status::ALL.iter().map(|s| (s.as_str(), 0)).collect();
        for r in self.records_for(f) {
            *counts.entry(r.status.as_str()).or_default() += 1;
        }
        counts
    }
}

/// Trains the surrogates the grid needs and runs every instance.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult, SweepError> {
    cfg.validate()?;
    let start = Instant::now();
    let surrogates = train_surrogates(cfg)?;
    log::info!("surrogates ready after {:.1} s", start.elapsed().as_secs_f64());
    let mut result = run_sweep_with(cfg, surrogates)?;
    result.total_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Builds one instance's model.
pub fn build_instance(
    cfg: &SweepConfig,
    surrogates: &TrainedSurrogates,
    formulation: Formulation,
    pressure: f64,
    conversion: f64,
) -> Result<Flowsheet, SweepError> {
    let params = cfg.flowsheet.with_operating_point(pressure, conversion);
    match formulation {
        Formulation::FullSpace | Formulation::Implicit => Ok(build_flowsheet(&cfg.thermo, &params, formulation)?),
        f => {
            let s = surrogates.get(f).ok_or_else(|| SweepError::Grid(format!("no trained surrogate for {f:?}")))?;
            Ok(build_surrogate_flowsheet(&cfg.thermo, &params, s)?)
        }
    }
}

/// Runs every instance with the given surrogates. Instances are independent;
/// the record order is fixed, so scheduling only affects timings.
pub fn run_sweep_with(cfg: &SweepConfig, surrogates: TrainedSurrogates) -> Result<SweepResult, SweepError> {
    cfg.validate()?;
    let start = Instant::now();
    let g = &cfg.grid;
    let train_x = cfg.surrogate.ranges.conversion;
    let tasks: Vec<(Formulation, usize, usize)> = g
        .formulations
        .iter()
        .flat_map(|&f| (0..g.pressures.len()).flat_map(move |pi| (0..g.conversions.len()).map(move |ci| (f, pi, ci))))
        .collect();
    let solved: Vec<(InstanceResult, Option<Statistics>)> = tasks
        .par_iter()
        .map(|&(f, pi, ci)| {
            let (p, x) = (g.pressures[pi], g.conversions[ci]);
            let mut rec = InstanceResult {
                formulation: f,
                pressure_index: pi,
                conversion_index: ci,
                pressure: p,
                conversion: x,
                status: Status::EvalError,
                iterations: 0,
                solve_time_s: 0.0,
                objective: f64::NAN,
                inputs: Inputs { gas_flow: f64::NAN, steam_flow: f64::NAN, bypass: f64::NAN },
                failure: None,
                quality: Quality::Undefined,
                out_of_bounds: !train_x.contains(x),
                point: Vec::new(),
                multipliers: Multipliers::default(),
            };
            let fs = match build_instance(cfg, &surrogates, f, p, x) {
                Ok(fs) => fs,
                Err(e) => {
                    rec.failure = Some(format!("build failed: {e}"));
                    return (rec, None);
                }
            };
            let t = Instant::now();
            let r = solve(&fs.model, &g.solver);
            rec.solve_time_s = t.elapsed().as_secs_f64();
            rec.status = r.status;
            rec.iterations = r.iterations;
            rec.objective = r.objective;
            rec.inputs = fs.inputs_at(&r.point);
            rec.failure = r.failure;
            rec.point = r.point;
            rec.multipliers = r.multipliers;
            log::debug!("{} P={p} X={x}: {:?} in {} iterations", f.short_name(), r.status, r.iterations);
            (rec, Some(fs.model.statistics()))
        })
        .collect();
    let mut statistics = BTreeMap::new();
    let mut records = Vec::with_capacity(solved.len());
    for (rec, st) in solved {
        if let Some(st) = st {
            statistics.entry(rec.formulation).or_insert(st);
        }
        records.push(rec);
    }
    evaluate_quality(cfg, &mut records);
    Ok(SweepResult {
        grid: g.clone(),
        records,
        statistics,
        surrogates,
        total_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Fills `quality` for every record that reached `Optimal` on an instance
/// where the full space did too. Non-full formulations are re-simulated at
/// their decisions; the full space scores zero against itself.
pub fn evaluate_quality(cfg: &SweepConfig, records: &mut [InstanceResult]) {
    let reference: BTreeMap<(usize, usize), f64> = records
        .iter()
        .filter(|r| r.formulation == Formulation::FullSpace && r.status == Status::Optimal)
        .map(|r| ((r.pressure_index, r.conversion_index), r.objective))
        .collect();
    let opts = BlockSolveOptions::default();
    records.par_iter_mut().for_each(|r| {
        let Some(&best) = reference.get(&(r.pressure_index, r.conversion_index)) else {
            return;
        };
        if r.status != Status::Optimal {
            return;
        }
        if r.formulation == Formulation::FullSpace {
            r.quality = Quality::Error(0.0);
            return;
        }
        let params = cfg.flowsheet.with_operating_point(r.pressure, r.conversion);
        r.quality = match simulate_square(&cfg.thermo, &params, r.inputs, &opts) {
            Ok(sol) => Quality::Error((sol.objective - best).abs() / best.abs().max(f64::MIN_POSITIVE)),
            Err(e) => Quality::ResimulationFailed(e.to_string()),
        };
    });
}

/// Block-triangular view of the reactor subsystem of the full-space model.
pub fn reactor_incidence(cfg: &ThermoConfig, params: &FlowsheetParams) -> Result<IncidenceReport, SweepError> {
    let state = sequential_pass(cfg, params, params.nominal).map_err(BuildError::from)?;
    let (model, _) = full_space_model(cfg, params, &state)?;
    let sub = extract_subsystem(&model, Tag::Reactor).map_err(BuildError::from)?;
    let g = sub.incidence();
    let p = crate::incidence::block_triangularize(&g).map_err(|e| SweepError::Grid(e.to_string()))?;
    let rows: Vec<String> = sub.equations.iter().map(|c| c.name.clone()).collect();
    let cols: Vec<String> = sub.outputs.iter().map(|&v| model.var(v).name.clone()).collect();
    Ok(incidence_report(&g, &p, &rows, &cols))
}

/// Runs `f` on a dedicated pool of `jobs` workers, or on the global pool.
pub fn with_workers<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, SweepError> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| SweepError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
