//! `coral` command-line interface.
//!
//! Exit codes: 0 success, 2 usage errors (unknown flag/subcommand, from the
//! argument parser), 3 unreadable config file, 4 config schema violation,
//! 5 dataset/checkpoint container errors, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coral_cli::config::{ConfigError, TaskConfig, TaskKind};
use coral_cli::container::{
    read_dataset, read_inr_checkpoint, read_processor_checkpoint, write_dataset,
    write_inr_checkpoint, write_processor_checkpoint, Dataset,
};
use coral_cli::pipeline::{self, DynamicsModels, PairModels, PipelineError};
use coral_cli::report;
use coral_core::data::{DynamicsPde, DynamicsSpec, GeometrySpec, IvpMap, IvpSpec};

#[derive(Parser)]
#[command(
    name = "coral",
    version,
    about = "Mesh-free operator learning with modulated neural fields: generate analytic PDE data, train encode-process-decode surrogates, evaluate, forecast, and design"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Train the modulated INR(s) for a config and write checkpoints.
    FitInr(FitInrArgs),
    /// Encode the training set and train the latent processor.
    FitProcessor(ConfigArgs),
    /// Run the task's evaluation protocol and write a report.
    Eval(EvalArgs),
    /// Per-timestep forecast errors for a trained dynamics model.
    Forecast(ForecastArgs),
    /// Gradient-based design optimization through trained geometry models.
    Design(ConfigArgs),
    /// Convert a report JSON into CSV tables and gnuplot curve files.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Dynamics,
    Ivp,
    Geometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PdeArg {
    Heat2d,
    Advection2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MapArg {
    Identity,
    Evolve,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    task: TaskArg,
    #[arg(long, default_value = "heat2d")]
    pde: PdeArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectories (dynamics) or samples (ivp/geometry).
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Base lattice resolution per axis.
    #[arg(long, default_value_t = 16)]
    res: usize,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Viscosity (heat).
    #[arg(long, default_value_t = 0.05)]
    nu: f64,
    /// Advection velocity.
    #[arg(long, default_value_t = 0.8)]
    cx: f64,
    #[arg(long, default_value_t = 0.3)]
    cy: f64,
    #[arg(long, default_value_t = 2)]
    k_max: i32,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Percent of the lattice retained per sample (ivp/geometry).
    #[arg(long, default_value_t = 100.0)]
    pi: f64,
    /// Input-to-output map for the initial-value task.
    #[arg(long, default_value = "evolve")]
    map: MapArg,
    /// Evolution time of the initial-value output function.
    #[arg(long, default_value_t = 0.5)]
    t_star: f64,
    /// Control-node displacement bound (geometry).
    #[arg(long, default_value_t = 0.12)]
    max_disp: f64,
    #[arg(long, default_value_t = 4.0)]
    gamma: f64,
    #[arg(long, default_value_t = 4096)]
    boundary_samples: usize,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct FitInrArgs {
    #[arg(long)]
    config: PathBuf,
    /// Which function space to fit for paired tasks; both when omitted.
    #[arg(long, value_parser = ["input", "output", "both", "state"])]
    role: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report destination (default `<out_dir>/report.json`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    horizon: usize,
    /// CSV destination (default `<out_dir>/forecast.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON produced by `eval`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Container(#[from] coral_cli::container::ContainerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("missing {what}: {path} (run `{hint}` first)")]
    Missing { what: &'static str, path: PathBuf, hint: &'static str },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Unreadable { .. }) => 3,
            CliError::Config(_) => 4,
            CliError::Container(_) => 5,
            CliError::Pipeline(PipelineError::Container(_)) => 5,
            CliError::Pipeline(PipelineError::Config(ConfigError::Unreadable { .. })) => 3,
            CliError::Pipeline(PipelineError::Config(_)) => 4,
            CliError::Missing { .. } => 5,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Generate(args) => generate(args),
        Cmd::FitInr(args) => fit_inr(args),
        Cmd::FitProcessor(args) => fit_processor(args),
        Cmd::Eval(args) => eval(args),
        Cmd::Forecast(args) => forecast(args),
        Cmd::Design(args) => design(args),
        Cmd::Report(args) => emit_report(args),
    }
}

fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let err = |e: coral_core::CoreError| CliError::Other(e.to_string());
    let ds = match args.task {
        TaskArg::Dynamics => {
            let spec = DynamicsSpec {
                pde: match args.pde {
                    PdeArg::Heat2d => DynamicsPde::Heat2d { nu: args.nu },
                    PdeArg::Advection2d => DynamicsPde::Advection2d { cx: args.cx, cy: args.cy },
                },
                n_traj: args.count,
                grid_res: args.res,
                n_frames: args.frames,
                dt: args.dt,
                k_max: args.k_max,
                amplitude: args.amplitude,
                seed: args.seed,
            };
            let built = spec.generate().map_err(err)?;
            Dataset::Dynamics { spec: built.spec, trajectories: built.trajectories }
        }
        TaskArg::Ivp => {
            let spec = IvpSpec {
                pde: match args.pde {
                    PdeArg::Heat2d => DynamicsPde::Heat2d { nu: args.nu },
                    PdeArg::Advection2d => DynamicsPde::Advection2d { cx: args.cx, cy: args.cy },
                },
                map: match args.map {
                    MapArg::Identity => IvpMap::Identity,
                    MapArg::Evolve => IvpMap::Evolve { t_star: args.t_star },
                },
                n_samples: args.count,
                grid_res: args.res,
                sample_pi: args.pi,
                k_max: args.k_max,
                amplitude: args.amplitude,
                seed: args.seed,
            };
            let built = spec.generate().map_err(err)?;
            Dataset::Ivp { spec: built.spec, pairs: built.pairs }
        }
        TaskArg::Geometry => {
            let spec = GeometrySpec {
                n_samples: args.count,
                grid_res: args.res,
                sample_pi: args.pi,
                max_disp: args.max_disp,
                gamma: args.gamma,
                boundary_samples: args.boundary_samples,
                seed: args.seed,
            };
            let built = spec.generate().map_err(err)?;
            Dataset::Geometry {
                spec: built.spec,
                samples: built
                    .samples
                    .into_iter()
                    .map(|s| (s.deform.disp, s.input, s.output))
                    .collect(),
            }
        }
    };
    write_dataset(&args.out, &ds)?;
    println!("wrote {} dataset ({} samples) to {}", ds.task_name(), ds.len(), args.out.display());
    Ok(())
}

struct RunPaths {
    inr_state: PathBuf,
    inr_input: PathBuf,
    inr_output: PathBuf,
    processor: PathBuf,
}

fn run_paths(cfg: &TaskConfig) -> RunPaths {
    let d = &cfg.paths.out_dir;
    RunPaths {
        inr_state: d.join("inr_state.ckpt"),
        inr_input: d.join("inr_input.ckpt"),
        inr_output: d.join("inr_output.ckpt"),
        processor: d.join("processor.ckpt"),
    }
}

fn require(path: &Path, what: &'static str, hint: &'static str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Missing { what, path: path.to_path_buf(), hint });
    }
    Ok(())
}

fn load_train_dataset(cfg: &TaskConfig) -> Result<Dataset, CliError> {
    require(&cfg.paths.dataset, "dataset", "coral generate")?;
    Ok(read_dataset(&cfg.paths.dataset)?)
}

fn load_test_dataset(cfg: &TaskConfig) -> Result<Dataset, CliError> {
    let path = cfg
        .paths
        .test_dataset
        .as_ref()
        .ok_or_else(|| CliError::Other("config has no paths.test_dataset".into()))?;
    require(path, "test dataset", "coral generate")?;
    Ok(read_dataset(path)?)
}

fn fit_inr(args: FitInrArgs) -> Result<(), CliError> {
    let cfg = TaskConfig::load(&args.config)?;
    let ds = load_train_dataset(&cfg)?;
    let paths = run_paths(&cfg);
    match cfg.task {
        TaskKind::Dynamics => {
            let (ckpt, trace) = pipeline::fit_dynamics_inr(&cfg, &ds)?;
            write_inr_checkpoint(&paths.inr_state, &ckpt)?;
            report::write_trace_csv(&cfg.paths.out_dir.join("trace_inr_state.csv"), &trace)?;
            println!(
                "fitted state inr: final loss {:e}; checkpoint {}",
                trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                paths.inr_state.display()
            );
        }
        TaskKind::Ivp | TaskKind::Geometry => {
            let role = args.role.as_deref().unwrap_or("both");
            if role == "state" {
                return Err(CliError::Other("role `state` is for dynamics configs".into()));
            }
            if role == "input" || role == "both" {
                let (ckpt, trace) = pipeline::fit_pair_inr(&cfg, &ds, pipeline::PairRole::Input)?;
                write_inr_checkpoint(&paths.inr_input, &ckpt)?;
                report::write_trace_csv(&cfg.paths.out_dir.join("trace_inr_input.csv"), &trace)?;
                println!(
                    "fitted input inr: final loss {:e}; checkpoint {}",
                    trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                    paths.inr_input.display()
                );
            }
            if role == "output" || role == "both" {
                let (ckpt, trace) = pipeline::fit_pair_inr(&cfg, &ds, pipeline::PairRole::Output)?;
                write_inr_checkpoint(&paths.inr_output, &ckpt)?;
                report::write_trace_csv(&cfg.paths.out_dir.join("trace_inr_output.csv"), &trace)?;
                println!(
                    "fitted output inr: final loss {:e}; checkpoint {}",
                    trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                    paths.inr_output.display()
                );
            }
        }
    }
    Ok(())
}

fn fit_processor(args: ConfigArgs) -> Result<(), CliError> {
    let cfg = TaskConfig::load(&args.config)?;
    let ds = load_train_dataset(&cfg)?;
    let paths = run_paths(&cfg);
    match cfg.task {
        TaskKind::Dynamics => {
            require(&paths.inr_state, "checkpoint", "coral fit-inr")?;
            let mut inr = read_inr_checkpoint(&paths.inr_state)?;
            let (node, trace) = pipeline::fit_dynamics_node(&cfg, &ds, &mut inr)?;
            // The INR checkpoint now carries the fitted code statistics.
            write_inr_checkpoint(&paths.inr_state, &inr)?;
            write_processor_checkpoint(&paths.processor, &node)?;
            report::write_trace_csv(&cfg.paths.out_dir.join("trace_processor.csv"), &trace)?;
            println!(
                "fitted node processor: final loss {:e}; checkpoint {}",
                trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                paths.processor.display()
            );
        }
        TaskKind::Ivp | TaskKind::Geometry => {
            require(&paths.inr_input, "checkpoint", "coral fit-inr")?;
            require(&paths.inr_output, "checkpoint", "coral fit-inr")?;
            let mut input = read_inr_checkpoint(&paths.inr_input)?;
            let mut output = read_inr_checkpoint(&paths.inr_output)?;
            let (proc, trace) = pipeline::fit_pair_processor(&cfg, &ds, &mut input, &mut output)?;
            write_inr_checkpoint(&paths.inr_input, &input)?;
            write_inr_checkpoint(&paths.inr_output, &output)?;
            write_processor_checkpoint(&paths.processor, &proc)?;
            report::write_trace_csv(&cfg.paths.out_dir.join("trace_processor.csv"), &trace)?;
            println!(
                "fitted mlp processor: final loss {:e}; checkpoint {}",
                trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                paths.processor.display()
            );
        }
    }
    Ok(())
}

fn load_dynamics_models(cfg: &TaskConfig) -> Result<DynamicsModels, CliError> {
    let paths = run_paths(cfg);
    require(&paths.inr_state, "checkpoint", "coral fit-inr")?;
    require(&paths.processor, "checkpoint", "coral fit-processor")?;
    Ok(DynamicsModels {
        inr: read_inr_checkpoint(&paths.inr_state)?,
        node: read_processor_checkpoint(&paths.processor)?,
    })
}

fn load_pair_models(cfg: &TaskConfig) -> Result<PairModels, CliError> {
    let paths = run_paths(cfg);
    require(&paths.inr_input, "checkpoint", "coral fit-inr")?;
    require(&paths.inr_output, "checkpoint", "coral fit-inr")?;
    require(&paths.processor, "checkpoint", "coral fit-processor")?;
    Ok(PairModels {
        input: read_inr_checkpoint(&paths.inr_input)?,
        output: read_inr_checkpoint(&paths.inr_output)?,
        proc: read_processor_checkpoint(&paths.processor)?,
    })
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = TaskConfig::load(&args.config)?;
    let report_path = args.out.unwrap_or_else(|| cfg.paths.out_dir.join("report.json"));
    let rep = match cfg.task {
        TaskKind::Dynamics => {
            let models = load_dynamics_models(&cfg)?;
            let test = load_test_dataset(&cfg)?;
            pipeline::eval_dynamics(&cfg, &models, &test)?
        }
        TaskKind::Ivp | TaskKind::Geometry => {
            let models = load_pair_models(&cfg)?;
            let test = load_test_dataset(&cfg)?;
            let train = load_train_dataset(&cfg)?;
            pipeline::eval_pair_task(&cfg, &models, &test, Some(&train))?
        }
    };
    for e in &rep.entries {
        println!("{:<12} {:<28} mse {:>12.6e}  rel_l2 {:>12.6e}", e.split, e.grid, e.mse, e.rel_l2);
    }
    report::write_report_json(&report_path, &rep)?;
    println!("report written to {}", report_path.display());
    Ok(())
}

fn forecast(args: ForecastArgs) -> Result<(), CliError> {
    let cfg = TaskConfig::load(&args.config)?;
    if cfg.task != TaskKind::Dynamics {
        return Err(CliError::Other("forecast applies to dynamics configs".into()));
    }
    let models = load_dynamics_models(&cfg)?;
    let test = load_test_dataset(&cfg)?;
    let curve = pipeline::forecast_curve(&cfg, &models, &test, args.horizon)?;
    let out = args.out.unwrap_or_else(|| cfg.paths.out_dir.join("forecast.csv"));
    report::write_curve_csv(&out, &curve)?;
    println!("forecast over {} steps written to {}", curve.len(), out.display());
    Ok(())
}

fn design(args: ConfigArgs) -> Result<(), CliError> {
    let cfg = TaskConfig::load(&args.config)?;
    if cfg.task != TaskKind::Geometry {
        return Err(CliError::Other("design applies to geometry configs".into()));
    }
    let design_cfg = cfg
        .design
        .clone()
        .ok_or_else(|| CliError::Other("config has no design section".into()))?;
    let models = load_pair_models(&cfg)?;
    let ds = load_train_dataset(&cfg)?;
    let geo_spec = match &ds {
        Dataset::Geometry { spec, .. } => spec.clone(),
        _ => return Err(CliError::Other("design needs a geometry dataset".into())),
    };
    let outcome = pipeline::inverse_design(&models, &geo_spec, &design_cfg, None)?;
    let trace: Vec<(usize, f64)> =
        outcome.trace.iter().copied().enumerate().collect();
    report::write_curve_csv(&cfg.paths.out_dir.join("design_trace.csv"), &trace)?;
    let params_path = cfg.paths.out_dir.join("design_params.json");
    std::fs::write(
        &params_path,
        serde_json::to_string_pretty(&outcome).expect("outcome serializes"),
    )
    .map_err(|e| CliError::Other(format!("cannot write {}: {e}", params_path.display())))?;
    println!(
        "design finished: objective {:e} -> {:e}; parameters in {}",
        outcome.trace.first().unwrap_or(&f64::NAN),
        outcome.trace.last().unwrap_or(&f64::NAN),
        params_path.display()
    );
    Ok(())
}

fn emit_report(args: ReportArgs) -> Result<(), CliError> {
    let rep = report::read_report_json(&args.report)?;
    report::write_metrics_csv(&args.out_dir.join("metrics.csv"), &rep)?;
    if !rep.per_timestep.is_empty() {
        let curve: Vec<(usize, f64)> =
            rep.per_timestep.iter().copied().enumerate().collect();
        report::write_curve_csv(&args.out_dir.join("per_timestep.csv"), &curve)?;
        report::write_curve_dat(
            &args.out_dir.join("per_timestep.dat"),
            &format!("{} per-timestep mse", rep.task),
            &curve,
        )?;
    }
    println!("report tables written to {}", args.out_dir.display());
    Ok(())
}
