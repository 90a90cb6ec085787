use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowopt::model::Formulation;
use flowopt::nlp::solve as nlp_solve;
use flowopt::surrogate::{r_squared, sample_dataset, train_mlp, train_poly, Dataset, Split, Surrogate};
use flowopt::sweep::{
    build_instance, emit_reports, incidence_svg, reactor_incidence, run_sweep, with_workers, Summary, SweepConfig,
    TrainedSurrogates,
};

#[derive(Parser)]
#[command(name = "flowopt", version, about = "Reformer flowsheet optimization in full-space, surrogate and implicit form")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Solves one instance and prints the result.
    Solve(SolveArgs),
    /// Samples the reactor section into a CSV dataset.
    GenData(GenDataArgs),
    /// Fits a surrogate to a dataset and writes it as JSON.
    TrainSurrogate(TrainArgs),
    /// Writes the block-triangular incidence plot of the reactor block.
    BltReport(BltArgs),
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Runs every instance of the grid and writes the reports.
    Run(RunArgs),
}

#[derive(Args)]
struct SolverFlags {
    /// Disable step clipping in the reactor block solves.
    #[arg(long)]
    no_clip: bool,
    /// Stop at the first evaluation error instead of backtracking.
    #[arg(long)]
    fail_hard: bool,
}

impl SolverFlags {
    fn apply(&self, cfg: &mut SweepConfig) {
        cfg.grid.solver.inner.no_clip |= self.no_clip;
        cfg.grid.solver.fail_hard |= self.fail_hard;
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: SolverFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulationArg {
    Full,
    Alamo,
    Nn,
    Implicit,
}

impl From<FormulationArg> for Formulation {
    fn from(f: FormulationArg) -> Self {
        match f {
            FormulationArg::Full => Formulation::FullSpace,
            FormulationArg::Alamo => Formulation::SurrogateAlamo,
            FormulationArg::Nn => Formulation::SurrogateNn,
            FormulationArg::Implicit => Formulation::Implicit,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    formulation: FormulationArg,
    /// Inlet pressure, Pa.
    #[arg(long)]
    pressure: f64,
    #[arg(long)]
    conversion: f64,
    /// Sweep config supplying process data and surrogate settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained surrogate to embed instead of training one.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: SolverFlags,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Poly,
    Mlp,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    family: Family,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config supplying the term budget and network settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BltArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<SweepConfig> {
    match path {
        Some(p) => SweepConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SweepConfig::default()),
    }
}

fn sweep_run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(Some(&a.config))?;
    if let Some(s) = a.seed {
        cfg.grid.seed = s;
    }
    a.flags.apply(&mut cfg);
    let result = with_workers(a.jobs, || run_sweep(&cfg))??;
    let files = emit_reports(&result, &cfg, &a.out)?;
    let summary = Summary::of(&result);
    for f in &summary.formulations {
        let ok = f.status_counts.first().map_or(0, |c| c.1);
        println!("{:>8}: {ok}/{} optimal", f.formulation.short_name(), result.grid.instances());
    }
    println!("intersection of successful instances: {}", summary.intersection.len());
    for p in files {
        println!("wrote {}", p.display());
    }
    println!("total {:.1} s", result.total_time_s);
    Ok(())
}

fn solve_one(a: SolveArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.grid.seed = s;
    }
    a.flags.apply(&mut cfg);
    let formulation = Formulation::from(a.formulation);
    cfg.grid.formulations = vec![formulation];
    let mut surrogates = TrainedSurrogates::default();
    match (&a.surrogate, formulation) {
        (_, Formulation::FullSpace | Formulation::Implicit) => {}
        (Some(path), f) => {
            let s = Surrogate::load(path).with_context(|| format!("loading {}", path.display()))?;
            if s.formulation() != f {
                bail!("{} holds a {:?} surrogate, not {f:?}", path.display(), s.formulation());
            }
            match s {
                Surrogate::Poly(_) => surrogates.poly = Some(s),
                Surrogate::Mlp(_) => surrogates.mlp = Some(s),
            }
        }
        (None, _) => surrogates = flowopt::sweep::train_surrogates(&cfg)?,
    }
    let fs = build_instance(&cfg, &surrogates, formulation, a.pressure, a.conversion)?;
    let stats = fs.model.statistics();
    let r = nlp_solve(&fs.model, &cfg.grid.solver);
    let inputs = fs.inputs_at(&r.point);
    println!("formulation  {}", formulation.short_name());
    println!("size         {} variables, {} constraints", stats.variables, stats.constraints);
    println!("status       {}", r.status.as_str());
    println!("iterations   {}", r.iterations);
    println!("time_s       {:.4}", r.wall_time.as_secs_f64());
    println!("objective    {}", r.objective);
    println!("F_G          {}", inputs.gas_flow);
    println!("F_s          {}", inputs.steam_flow);
    println!("alpha        {}", inputs.bypass);
    if let Some(f) = r.failure {
        println!("failure      {f}");
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = sample_dataset(&cfg.thermo, &cfg.flowsheet, a.n, &cfg.surrogate.ranges, a.seed);
    ds.save(&a.out)?;
    println!("wrote {} rows to {} ({} failed simulations)", ds.len(), a.out.display(), ds.failures);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = Dataset::load(&a.data)?;
    let s = match a.family {
        Family::Poly => Surrogate::Poly(train_poly(&data, cfg.surrogate.poly_budget)?),
        Family::Mlp => Surrogate::Mlp(train_mlp(&data, &cfg.surrogate.mlp)?.network),
    };
    let r2 = r_squared(&s, &data, Split::Validation)?;
    for (name, v) in data.output_names.iter().zip(&r2) {
        println!("{name:>8}  R² {v:.5}");
    }
    s.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn blt_report(a: BltArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let r = reactor_incidence(&cfg.thermo, &cfg.flowsheet)?;
    std::fs::write(&a.out, incidence_svg(&r)).with_context(|| format!("writing {}", a.out.display()))?;
    let sizes: Vec<String> = r.block_bounds.windows(2).map(|w| (w[1] - w[0]).to_string()).collect();
    println!("{} equations in {} blocks of sizes [{}]", r.size, sizes.len(), sizes.join(", "));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Sweep(SweepCommand::Run(a)) => sweep_run(a),
        Command::Solve(a) => solve_one(a),
        Command::GenData(a) => gen_data(a),
        Command::TrainSurrogate(a) => train(a),
        Command::BltReport(a) => blt_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
