use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use shapespline::baseline::{
    convergence_study, fit_piecewise_geodesic, interpolator_registry, l2_error, write_study_csv, Evolution, StudySetup,
};
use shapespline::dynamics::{h0, PhaseState, TimeGrid, Trajectory};
use shapespline::estimator::{extrapolate, fit, SplineProblem, SplineSolution};
use shapespline::io::{write_positions_csv, write_trajectory_csv, DatasetFile, ExperimentConfig};
use shapespline::kernels::{kernel_registry, KernelSettings, SharedKernel};
use shapespline::metric::{metric_registry, ControlMetric, MetricSettings};
use shapespline::observations::default_steps;
use shapespline::optimize::{optimizer_registry, Optimizer};
use shapespline::plot::space_time_svg;
use shapespline::stochastic::{
    mean_squared_displacement, monte_carlo_hamiltonian, random_momentum, simulate_kunita, simulate_sde, NoiseSpec,
};
use shapespline::synth::{
    circle, synth_circle_to_pinched_ellipse, synth_circle_to_rotating_ellipse, QuarticPath, RotatingEllipse,
};
use shapespline::{Error, Result};

/// Second-order shape splines and stochastic landmark evolutions.
#[derive(Parser, Debug)]
#[command(name = "shapespline", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Landmark dataset (JSON).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory; defaults to the configured one, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Kernel width.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    metric: Option<MetricName>,
    #[arg(long, global = true)]
    grid_steps: Option<usize>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Noise level given as √n·ε.
    #[arg(long, global = true)]
    eps_scaled: Option<f64>,
    /// Also write a space-time SVG plot.
    #[arg(long, global = true)]
    svg: bool,
    /// On failure, print a JSON error object to stderr.
    #[arg(long, global = true)]
    error_json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricName {
    Euclidean,
    Dualkernel,
    Measure,
}

impl MetricName {
    fn as_str(self) -> &'static str {
        match self {
            MetricName::Euclidean => "euclidean",
            MetricName::Dualkernel => "dualkernel",
            MetricName::Measure => "measure",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a shape spline to the dataset.
    Fit,
    /// Fit the piecewise-geodesic baseline to the dataset.
    Baseline,
    /// One second-order stochastic path.
    Simulate,
    /// One path of the first-order Kunita flow.
    Kunita,
    /// Ensemble statistics of the Hamiltonian under momentum noise.
    Montecarlo,
    /// Error against a known evolution for growing observation counts.
    Convergence {
        /// Comma-separated interpolation methods.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated observation counts.
        #[arg(long = "M", value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "rotating-ellipse")]
        truth: TruthName,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value = "pinched-ellipse")]
        kind: SynthKind,
        #[arg(long, default_value_t = 20)]
        landmarks: usize,
        /// Number of observations.
        #[arg(long, default_value_t = 5)]
        times: usize,
        /// Coordinate noise (pinched ellipse); defaults to the configured noise level.
        #[arg(long)]
        noise: Option<f64>,
        /// Dense truth steps (rotating ellipse).
        #[arg(long, default_value_t = 200)]
        dense_steps: usize,
    },
    /// Fit, then continue the spline geodesically to `--t-end`.
    Extrapolate {
        #[arg(long, allow_hyphen_values = true)]
        t_end: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TruthName {
    RotatingEllipse,
    Quartic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    PinchedEllipse,
    RotatingEllipse,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let error_json = cli.common.error_json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if error_json {
                eprintln!(
                    "{}",
                    json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code })
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}

struct Context {
    config: ExperimentConfig,
    dataset_path: Option<PathBuf>,
    out: PathBuf,
    svg: bool,
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = c.seed {
        config.seed = v;
    }
    if let Some(v) = c.gamma {
        config.gamma = v;
    }
    if let Some(v) = c.lambda {
        config.kernel_width = v;
    }
    if let Some(v) = c.metric {
        config.metric = v.as_str().into();
    }
    if let Some(v) = c.grid_steps {
        config.grid_steps = Some(v);
    }
    if let Some(v) = c.runs {
        config.simulation.runs = v;
    }
    if let Some(v) = c.eps_scaled {
        config.simulation.eps_scaled = v;
    }
    config.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| "out".into());
    fs::create_dir_all(&out)?;
    let ctx = Context {
        config,
        dataset_path: c.dataset,
        out,
        svg: c.svg,
    };
    match cli.command {
        Command::Fit => cmd_fit(&ctx),
        Command::Baseline => cmd_baseline(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Kunita => cmd_kunita(&ctx),
        Command::Montecarlo => cmd_montecarlo(&ctx),
        Command::Convergence { methods, m, truth } => cmd_convergence(&ctx, methods, m, truth),
        Command::Synth {
            kind,
            landmarks,
            times,
            noise,
            dense_steps,
        } => cmd_synth(&ctx, kind, landmarks, times, noise, dense_steps),
        Command::Extrapolate { t_end } => cmd_extrapolate(&ctx, t_end),
    }
}

fn kernel(config: &ExperimentConfig) -> Result<SharedKernel> {
    Ok(kernel_registry()
        .create(
            "gaussian",
            &KernelSettings {
                width: config.kernel_width,
            },
        )?
        .into())
}

fn metric(config: &ExperimentConfig) -> Result<Arc<dyn ControlMetric>> {
    let settings = MetricSettings {
        weight: config.control_weight,
        measure_width: config.measure_width,
        jitter: config.measure_jitter,
    };
    Ok(metric_registry().create(&config.metric, &settings)?.into())
}

fn load_dataset(ctx: &Context) -> Result<DatasetFile> {
    let path = ctx.dataset_path.as_ref().ok_or_else(|| Error::Validation {
        location: "--dataset".into(),
        message: "this command needs a dataset".into(),
    })?;
    let ds = DatasetFile::read(path)?;
    if ctx.config.noise_sigma > 0.0 {
        ds.with_noise(ctx.config.noise_sigma, ctx.config.seed)
    } else {
        Ok(ds)
    }
}

fn build_problem(ctx: &Context, ds: &DatasetFile) -> Result<SplineProblem> {
    let cfg = &ctx.config;
    let obs = ds.observation_set()?;
    let times = obs.times();
    let horizon = cfg.horizon.unwrap_or(obs.last_time());
    let steps = match cfg.grid_steps {
        Some(n) => n,
        None => default_steps(&times, horizon, shapespline::estimator::STEPS_PER_GAP),
    };
    let grid = TimeGrid::new(horizon, steps)?;
    let optimizer = optimizer_registry().create(&cfg.optimizer, &cfg.optimizer_settings)?;
    Ok(SplineProblem::new(
        ds.initial_configuration(),
        obs,
        kernel(cfg)?,
        metric(cfg)?,
        cfg.gamma,
        grid,
    )?
    .with_optimizer(optimizer.into()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, format!("{}\n", serde_json::to_string_pretty(v)?))?;
    Ok(())
}

fn truth_error(ds: &DatasetFile, traj: &Trajectory) -> Result<Option<f64>> {
    let times: Vec<f64> = traj.grid.nodes().collect();
    match ds.truth_at(&times, 1e-9 * traj.grid.dt()) {
        Some(reference) => l2_error(traj, &reference, 0.0, traj.grid.horizon()).map(Some),
        None => Ok(None),
    }
}

fn observation_nodes(prob: &SplineProblem) -> Result<Vec<usize>> {
    let mut nodes = vec![0];
    nodes.extend(prob.obs.node_indices(&prob.grid)?);
    nodes.dedup();
    Ok(nodes)
}

fn spline_summary(sol: &SplineSolution, prob: &SplineProblem) -> Value {
    json!({
        "objective": sol.objective,
        "control_cost": sol.control_cost,
        "data_misfit": sol.data_misfit,
        "control_energy": sol.control_energy(),
        "residuals": sol.residuals,
        "max_residual": sol.max_residual(),
        "euler_lagrange_residual": sol.euler_lagrange_residual(),
        "p0_residual": sol.gradient.p0_residual(),
        "iterations": sol.iterations,
        "evaluations": sol.evaluations,
        "stop_reason": sol.reason,
        "converged": sol.converged(),
        "metric": prob.metric.name(),
        "optimizer": prob.optimizer.name(),
        "gamma": prob.gamma,
        "kernel_width": prob.kernel.length_scale(),
        "grid_steps": prob.grid.steps(),
        "horizon": prob.grid.horizon(),
    })
}

fn cmd_fit(ctx: &Context) -> Result<()> {
    let ds = load_dataset(ctx)?;
    let prob = build_problem(ctx, &ds)?;
    let sol = fit(&prob)?;
    write_trajectory_csv(
        &sol.traj,
        Some(&sol.u),
        0.0,
        BufWriter::new(File::create(ctx.out.join("trajectory.csv"))?),
    )?;
    let mut summary = spline_summary(&sol, &prob);
    summary["command"] = json!("fit");
    summary["truth_l2_error"] = json!(truth_error(&ds, &sol.traj)?);
    write_json(&ctx.out.join("summary.json"), &summary)?;
    if ctx.svg {
        fs::write(
            ctx.out.join("trajectory.svg"),
            space_time_svg(&sol.traj, Some(&sol.u), &observation_nodes(&prob)?),
        )?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_baseline(ctx: &Context) -> Result<()> {
    let ds = load_dataset(ctx)?;
    let prob = build_problem(ctx, &ds)?;
    let sol = fit_piecewise_geodesic(&prob)?;
    write_trajectory_csv(
        &sol.traj,
        None,
        0.0,
        BufWriter::new(File::create(ctx.out.join("trajectory.csv"))?),
    )?;
    let summary = json!({
        "command": "baseline",
        "objective": sol.objective,
        "energy": sol.energy,
        "residuals": sol.residuals,
        "iterations": sol.iterations,
        "stop_reason": sol.reason,
        "converged": sol.converged(),
        "impulse_nodes": sol.jumps.iter().map(|(j, _)| *j).collect::<Vec<_>>(),
        "truth_l2_error": truth_error(&ds, &sol.traj)?,
        "gamma": prob.gamma,
        "grid_steps": prob.grid.steps(),
        "horizon": prob.grid.horizon(),
    });
    write_json(&ctx.out.join("summary.json"), &summary)?;
    if ctx.svg {
        fs::write(
            ctx.out.join("trajectory.svg"),
            space_time_svg(&sol.traj, None, &observation_nodes(&prob)?),
        )?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_extrapolate(ctx: &Context, t_end: f64) -> Result<()> {
    let ds = load_dataset(ctx)?;
    let prob = build_problem(ctx, &ds)?;
    let sol = fit(&prob)?;
    let ext = extrapolate(&sol, t_end, &prob)?;
    write_trajectory_csv(
        &sol.traj,
        Some(&sol.u),
        0.0,
        BufWriter::new(File::create(ctx.out.join("trajectory.csv"))?),
    )?;
    write_trajectory_csv(
        &ext.trajectory,
        None,
        ext.offset,
        BufWriter::new(File::create(ctx.out.join("extrapolation.csv"))?),
    )?;
    let mut summary = spline_summary(&sol, &prob);
    summary["command"] = json!("extrapolate");
    summary["t_end"] = json!(t_end);
    summary["extrapolation_steps"] = json!(ext.trajectory.grid.steps());
    write_json(&ctx.out.join("summary.json"), &summary)?;
    if ctx.svg {
        fs::write(
            ctx.out.join("extrapolation.svg"),
            space_time_svg(&ext.trajectory, None, &[0, ext.trajectory.grid.steps()]),
        )?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Initial state for the stochastic commands: the dataset's initial configuration if given,
/// else a unit circle; momentum at the configured energy.
fn initial_state(ctx: &Context) -> Result<PhaseState> {
    let cfg = &ctx.config;
    let (x, dim) = match &ctx.dataset_path {
        Some(_) => {
            let ds = load_dataset(ctx)?;
            (ds.initial_configuration(), ds.dimension)
        }
        None => (circle(cfg.simulation.landmarks), 2),
    };
    let k = kernel(cfg)?;
    let p = random_momentum(&x, dim, k.as_ref(), cfg.simulation.initial_energy, cfg.seed)?;
    PhaseState::new(dim, x, p)
}

fn sim_grid(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    TimeGrid::new(cfg.simulation.horizon, cfg.grid_steps.unwrap_or(cfg.simulation.steps))
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let q0 = initial_state(ctx)?;
    let k = kernel(cfg)?;
    let noise = NoiseSpec::rescaled(cfg.simulation.eps_scaled, q0.landmarks(), cfg.seed)?;
    let traj = simulate_sde(&q0, sim_grid(cfg)?, &noise, k.as_ref(), None)?;
    write_trajectory_csv(
        &traj,
        None,
        0.0,
        BufWriter::new(File::create(ctx.out.join("trajectory.csv"))?),
    )?;
    let summary = json!({
        "command": "simulate",
        "landmarks": q0.landmarks(),
        "eps": noise.bound(),
        "eps_scaled": cfg.simulation.eps_scaled,
        "seed": cfg.seed,
        "h0_start": h0(&q0, k.as_ref()),
        "h0_end": h0(traj.last(), k.as_ref()),
    });
    write_json(&ctx.out.join("summary.json"), &summary)?;
    if ctx.svg {
        fs::write(
            ctx.out.join("trajectory.svg"),
            space_time_svg(&traj, None, &[0, traj.grid.steps()]),
        )?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_kunita(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let q0 = initial_state(ctx)?;
    let k = kernel(cfg)?;
    let grid = sim_grid(cfg)?;
    let path = simulate_kunita(&q0.x, q0.dim, grid, cfg.simulation.kunita_sigma, cfg.seed, k.as_ref())?;
    let times: Vec<f64> = grid.nodes().collect();
    write_positions_csv(
        &times,
        &path,
        q0.dim,
        BufWriter::new(File::create(ctx.out.join("positions.csv"))?),
    )?;
    let msd = mean_squared_displacement(std::slice::from_ref(&path), q0.dim);
    let summary = json!({
        "command": "kunita",
        "landmarks": q0.landmarks(),
        "sigma": cfg.simulation.kunita_sigma,
        "seed": cfg.seed,
        "final_mean_squared_displacement": msd.last(),
    });
    write_json(&ctx.out.join("summary.json"), &summary)?;
    if ctx.svg {
        let states = path
            .iter()
            .map(|x| PhaseState {
                dim: q0.dim,
                x: x.clone(),
                p: vec![0.0; x.len()],
            })
            .collect();
        let traj = Trajectory { grid, states };
        fs::write(
            ctx.out.join("positions.svg"),
            space_time_svg(&traj, None, &[0, grid.steps()]),
        )?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_montecarlo(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let q0 = initial_state(ctx)?;
    let k = kernel(cfg)?;
    let noise = NoiseSpec::rescaled(cfg.simulation.eps_scaled, q0.landmarks(), cfg.seed)?;
    let stats = monte_carlo_hamiltonian(&q0, sim_grid(cfg)?, &noise, k.as_ref(), cfg.simulation.runs)?;
    stats.write_csv(BufWriter::new(File::create(ctx.out.join("montecarlo.csv"))?))?;
    let eps = noise.bound();
    let predicted = q0.x.len() as f64 * eps * eps / 2.0;
    let summary = json!({
        "command": "montecarlo",
        "landmarks": q0.landmarks(),
        "eps": eps,
        "eps_scaled": cfg.simulation.eps_scaled,
        "runs": stats.runs,
        "divergences": stats.divergences,
        "slope": stats.slope,
        "predicted_slope": predicted,
        "relative_deviation": if predicted > 0.0 { Some((stats.slope - predicted).abs() / predicted) } else { None },
        "seed": cfg.seed,
    });
    write_json(&ctx.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_convergence(ctx: &Context, methods: Option<Vec<String>>, m: Option<Vec<usize>>, truth: TruthName) -> Result<()> {
    let mut cfg = ctx.config.clone();
    if let Some(methods) = methods {
        cfg.convergence.methods = methods;
    }
    if let Some(m) = m {
        cfg.convergence.m_list = m;
    }
    cfg.validate()?;
    let rotating = RotatingEllipse {
        landmarks: cfg.convergence.landmarks,
    };
    let quartic = QuarticPath::default();
    let truth: &dyn Evolution = match truth {
        TruthName::RotatingEllipse => &rotating,
        TruthName::Quartic => &quartic,
    };
    let registry = interpolator_registry();
    let interpolators = cfg
        .convergence
        .methods
        .iter()
        .map(|n| registry.create(n, &()))
        .collect::<Result<Vec<_>>>()?;
    let k = kernel(&cfg)?;
    let m_metric = metric(&cfg)?;
    let optimizer: Arc<dyn Optimizer> = optimizer_registry()
        .create(&cfg.optimizer, &cfg.optimizer_settings)?
        .into();
    let gamma = cfg.gamma;
    let problem = move |x0: Vec<f64>, obs, grid| {
        Ok(SplineProblem::new(x0, obs, k.clone(), m_metric.clone(), gamma, grid)?.with_optimizer(optimizer.clone()))
    };
    let setup = StudySetup {
        truth,
        problem: &problem,
        steps_per_gap: cfg.convergence.steps_per_gap,
    };
    let mut rows = Vec::new();
    let mut slopes = serde_json::Map::new();
    for method in &interpolators {
        let study = convergence_study(&setup, &cfg.convergence.m_list, method.as_ref())?;
        slopes.insert(method.name().into(), json!(study.slope.value()));
        rows.extend(study.rows);
    }
    write_study_csv(&rows, BufWriter::new(File::create(ctx.out.join("convergence.csv"))?))?;
    let failures: Vec<Value> = rows
        .iter()
        .filter_map(|r| {
            r.failure
                .as_ref()
                .map(|f| json!({ "method": r.method, "M": r.m, "failure": f }))
        })
        .collect();
    let details: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "method": r.method,
                "M": r.m,
                "E": r.error,
                "converged": r.converged,
                "stationarity": r.stationarity,
            })
        })
        .collect();
    let summary = json!({
        "command": "convergence",
        "m_list": cfg.convergence.m_list,
        "slopes": slopes,
        "rows": details,
        "failures": failures,
    });
    write_json(&ctx.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_synth(ctx: &Context, kind: SynthKind, n: usize, m: usize, noise: Option<f64>, dense_steps: usize) -> Result<()> {
    let ds = match kind {
        SynthKind::PinchedEllipse => {
            synth_circle_to_pinched_ellipse(n, m, noise.unwrap_or(ctx.config.noise_sigma), ctx.config.seed)?
        }
        SynthKind::RotatingEllipse => synth_circle_to_rotating_ellipse(n, dense_steps, m)?,
    };
    let path = ctx.out.join("dataset.json");
    ds.write(&path)?;
    println!(
        "{}",
        json!({ "command": "synth", "dataset": path.display().to_string() })
    );
    Ok(())
}
