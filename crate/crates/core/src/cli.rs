//! Command-line orchestration: fixture generation, closed-form fitting,
//! surrogate training, posterior inference, impact assessment, and report
//! emission. Every run logs its resolved configuration and master seed;
//! exit codes separate usage errors (2), data errors (3), and quality
//! gates (4).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::closed_form::{
    demand_totals, fit_grid, mode_totals, predict_table, r_squared, FitGrid, ModelKind, ParamGrid,
    SURVEY_MODES,
};
use crate::error::{Error, Result};
use crate::impact::{aggregate_posterior, run_scenario, ImpactConstants, IMPACT_METRICS};
use crate::inference::{
    evaluate_samples, max_likelihood, prior_samples, read_posterior_csv, write_posterior_csv,
    OracleBackend, ProbBackend, SurrogateBackend,
};
use crate::io::{
    emit_report_csv, emit_report_json, gen_fixture, load_bundle, load_report, FixtureSpec,
    GridSpec, Report, RunConfig, ScenarioSpec, DEFAULT_TRUE_PARAMS,
};
use crate::mc::SimParams;
use crate::surrogate::{gen_training_set, train, validate, MlpModel, SamplingConfig, TrainConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_GATE: u8 = 4;

/// Validation gates for the trained surrogate, in absolute probability.
pub const GATE_MEAN_ABS_ERR: f64 = 0.01;
pub const GATE_MAX_ABS_ERR: f64 = 0.05;

#[derive(Parser)]
#[command(
    name = "modeshift",
    version,
    about = "Probabilistic mode-choice simulation and mode-shift impact assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a recoverable ground truth.
    GenFixture(GenFixtureArgs),
    /// Fit a closed-form choice model to the survey demand by grid search.
    FitClosed(FitClosedArgs),
    /// Generate oracle-labeled samples and train the likelihood surrogate.
    TrainSurrogate(TrainSurrogateArgs),
    /// Two-stage Bayesian grid inference of the simulation parameters.
    Infer(InferArgs),
    /// Posterior-weighted scenario impact assessment.
    Impact(ImpactArgs),
    /// Re-emit a report as validated JSON or per-scope CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenFixtureArgs {
    /// Output directory for the bundle and manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    zones: usize,
    #[arg(long, default_value_t = 4)]
    wage_groups: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Generating value-of-time coefficient.
    #[arg(long, default_value_t = DEFAULT_TRUE_PARAMS.beta)]
    beta: f64,
    /// Generating noise scale.
    #[arg(long, default_value_t = DEFAULT_TRUE_PARAMS.sigma)]
    sigma: f64,
    /// Generating taxi-FHV noise correlation.
    #[arg(long, default_value_t = DEFAULT_TRUE_PARAMS.cor_tfs)]
    cor_tfs: f64,
    /// Generating FHV-sharedFHV noise correlation.
    #[arg(long, default_value_t = DEFAULT_TRUE_PARAMS.cor_fs)]
    cor_fs: f64,
    /// Choice-model draws per generated demand cell.
    #[arg(long, default_value_t = 20_000)]
    gen_draws: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mnl,
    #[value(name = "logmnl")]
    LogMnl,
    Nested,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> ModelKind {
        match m {
            ModelArg::Mnl => ModelKind::Mnl,
            ModelArg::LogMnl => ModelKind::LogMnl,
            ModelArg::Nested => ModelKind::Nested,
        }
    }
}

#[derive(Args)]
struct FitClosedArgs {
    /// Dataset bundle directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Grid axes `lambda,beta[,tau_taxi_fhv,tau_fhv]`, each either a
    /// fixed value or `start:stop:count`.
    #[arg(long, default_value = "0.05:2:40,0.25:1:16")]
    grid: String,
    /// Output CSV with the best-fit parameters and metrics.
    #[arg(long, value_name = "params.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSurrogateArgs {
    /// Training-set size.
    #[arg(long, default_value_t = 150_000)]
    samples: usize,
    /// Monte Carlo draws behind each training target.
    #[arg(long, default_value_t = 20_000)]
    oracle_draws: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: u32,
    /// Initial learning rate (decays geometrically to --final-lr).
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().final_rate)]
    final_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// Output model file.
    #[arg(long, value_name = "model.bin")]
    out: PathBuf,
    /// Held-out points for the validation gates.
    #[arg(long, default_value_t = 1000)]
    validate_points: usize,
    /// Oracle draws per held-out point.
    #[arg(long, default_value_t = 100_000)]
    validate_draws: u64,
}

#[derive(Args)]
#[command(group(
    clap::ArgGroup::new("backend").required(true).args(["surrogate", "oracle"])
))]
struct InferArgs {
    /// Dataset bundle directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Use a trained surrogate model as the probability backend.
    #[arg(long, value_name = "model.bin")]
    surrogate: Option<PathBuf>,
    /// Use the Monte Carlo oracle as the probability backend.
    #[arg(long)]
    oracle: bool,
    /// Oracle draws per probability evaluation (with --oracle).
    #[arg(long, default_value_t = 20_000)]
    oracle_draws: u64,
    /// Prior grid sizes `BxSxC`; C is the correlation-lattice side.
    #[arg(long, default_value = "10x10x10")]
    grid: String,
    #[arg(long, default_value_t = 0x5EED)]
    seed: u64,
    /// Disable the probability floor in log-likelihoods.
    #[arg(long)]
    no_smoothing: bool,
    /// Output posterior CSV.
    #[arg(long, value_name = "posterior.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ImpactArgs {
    /// Dataset bundle directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Posterior CSV from `infer`.
    #[arg(long, value_name = "posterior.csv")]
    posterior: PathBuf,
    /// `no-sfhv`, `surcharge`, or a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// Simulated individuals per demand cell.
    #[arg(long, default_value_t = 1000)]
    reps: u32,
    #[arg(long, default_value_t = 0x1347)]
    seed: u64,
    /// Drop posterior samples below this weight.
    #[arg(long, default_value_t = 1e-10)]
    min_weight: f64,
    /// Multiplier lifting desk-scale results to a target ridership.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Output report JSON.
    #[arg(long, value_name = "report.json")]
    out: PathBuf,
    #[arg(long, default_value_t = ImpactConstants::default().miles_per_gallon)]
    mpg: f64,
    #[arg(long, default_value_t = ImpactConstants::default().co2_kg_per_gallon)]
    co2_kg_per_gallon: f64,
    #[arg(long, default_value_t = ImpactConstants::default().transit_fare)]
    transit_fare: f64,
    #[arg(long, default_value_t = ImpactConstants::default().sfhv_occupancy)]
    sfhv_occupancy: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Input report JSON.
    #[arg(long = "in", value_name = "report.json")]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: FormatArg,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Run the CLI on the given argv; returns the process exit code.
pub fn run_from<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenFixture(args) => cmd_gen_fixture(args),
        Command::FitClosed(args) => cmd_fit_closed(args),
        Command::TrainSurrogate(args) => cmd_train_surrogate(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Impact(args) => cmd_impact(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Result<u8> {
    eprintln!("error: {msg}");
    Ok(EXIT_USAGE)
}

fn cmd_gen_fixture(args: GenFixtureArgs) -> Result<u8> {
    let params = match SimParams::new(args.beta, args.sigma, args.cor_tfs, args.cor_fs) {
        Ok(p) => p,
        Err(e) => return usage(e),
    };
    let spec = FixtureSpec {
        n_zones: args.zones,
        n_wage_groups: args.wage_groups,
        true_params: params,
        seed: args.seed,
        gen_draws: args.gen_draws,
    };
    if let Err(e) = spec.validate() {
        return usage(e);
    }
    let mut config = RunConfig::new("gen-fixture", args.seed);
    config
        .set("out", args.out.display())
        .set("zones", args.zones)
        .set("wage-groups", args.wage_groups)
        .set("beta", params.beta)
        .set("sigma", params.sigma)
        .set("cor-tfs", params.cor_tfs)
        .set("cor-fs", params.cor_fs)
        .set("gen-draws", args.gen_draws);
    config.log();

    let bundle = gen_fixture(&spec, &args.out)?;
    println!(
        "fixture: {} zones, {} wage groups, {} survey cells, {} trip-record cells -> {}",
        bundle.zones.len(),
        bundle.wages.len(),
        bundle.demand4.len(),
        bundle.demand_tlc.len(),
        args.out.display()
    );
    Ok(EXIT_OK)
}

/// Parse one grid axis: a fixed value or `start:stop:count`.
fn parse_axis(s: &str) -> Result<ParamGrid> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| -> Result<f64> {
        p.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid_input(format!("bad number '{p}' in grid axis '{s}'")))
    };
    match parts.as_slice() {
        [v] => Ok(ParamGrid::fixed(num(v)?)),
        [start, stop, count] => {
            let count = count.trim().parse::<usize>().map_err(|_| {
                Error::invalid_input(format!("bad count '{count}' in grid axis '{s}'"))
            })?;
            let grid = ParamGrid {
                start: num(start)?,
                stop: num(stop)?,
                count,
            };
            grid.validate()?;
            Ok(grid)
        }
        _ => Err(Error::invalid_input(format!(
            "grid axis '{s}' must be VALUE or start:stop:count"
        ))),
    }
}

fn parse_fit_grid(s: &str) -> Result<FitGrid> {
    let axes: Vec<&str> = s.split(',').collect();
    match axes.as_slice() {
        [lambda, beta] => Ok(FitGrid::new(parse_axis(lambda)?, parse_axis(beta)?)),
        [lambda, beta, tau_a, tau_b] => Ok(FitGrid {
            lambda: parse_axis(lambda)?,
            beta: parse_axis(beta)?,
            tau_taxi_fhv: parse_axis(tau_a)?,
            tau_fhv: parse_axis(tau_b)?,
        }),
        _ => Err(Error::invalid_input(
            "grid must have 2 axes (lambda,beta) or 4 (lambda,beta,tau_taxi_fhv,tau_fhv)",
        )),
    }
}

fn cmd_fit_closed(args: FitClosedArgs) -> Result<u8> {
    let grid = match parse_fit_grid(&args.grid) {
        Ok(g) => g,
        Err(e) => return usage(e),
    };
    let kind: ModelKind = args.model.into();
    let mut config = RunConfig::new("fit-closed", 0);
    config
        .set("data", args.data.display())
        .set("model", format!("{kind:?}").to_lowercase())
        .set("grid", &args.grid)
        .set("out", args.out.display());
    config.log();

    let bundle = load_bundle(&args.data)?;
    let wages: std::collections::BTreeMap<String, f64> = bundle
        .wages
        .iter()
        .map(|(k, g)| (k.clone(), g.hourly_wage_usd))
        .collect();
    let fit = fit_grid(
        &bundle.demand4,
        &bundle.attrs,
        &wages,
        kind,
        &grid,
        &SURVEY_MODES,
    )?;
    let pred = predict_table(
        &bundle.demand4,
        &bundle.attrs,
        &wages,
        &fit.best,
        kind,
        &SURVEY_MODES,
    )?;
    let observed = demand_totals(&bundle.demand4, &SURVEY_MODES);
    let predicted = mode_totals(&pred, &SURVEY_MODES);
    let r2 = r_squared(&observed, &predicted)?;

    println!(
        "best fit: lambda={} beta={} tau_taxi_fhv={} tau_fhv={}",
        fit.best.lambda, fit.best.beta, fit.best.tau_taxi_fhv, fit.best.tau_fhv
    );
    println!("wrmse={:.6} r_squared={:.4}", fit.best_wrmse, r2);
    println!("mode,observed_trips,predicted_trips");
    for (i, &m) in SURVEY_MODES.iter().enumerate() {
        println!("{m},{:.1},{:.1}", observed[i], predicted[i]);
    }

    let mut out = String::from("model,lambda,beta,tau_taxi_fhv,tau_fhv,wrmse,r_squared\n");
    out.push_str(&format!(
        "{},{},{},{},{},{},{}\n",
        config.settings["model"],
        fit.best.lambda,
        fit.best.beta,
        fit.best.tau_taxi_fhv,
        fit.best.tau_fhv,
        fit.best_wrmse,
        r2
    ));
    std::fs::write(&args.out, out)?;
    Ok(EXIT_OK)
}

fn cmd_train_surrogate(args: TrainSurrogateArgs) -> Result<u8> {
    let sampling = SamplingConfig::default();
    let train_config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        final_rate: args.final_lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut config = RunConfig::new("train-surrogate", args.seed);
    config
        .set("samples", args.samples)
        .set("oracle-draws", args.oracle_draws)
        .set("epochs", args.epochs)
        .set("lr", args.lr)
        .set("final-lr", args.final_lr)
        .set("out", args.out.display())
        .set("validate-points", args.validate_points)
        .set("validate-draws", args.validate_draws);
    config.log();

    eprintln!("generating {} training samples...", args.samples);
    let dataset = match gen_training_set(args.samples, args.oracle_draws, &sampling, args.seed) {
        Ok(d) => d,
        Err(e @ Error::InvalidInput(_)) | Err(e @ Error::InvalidParameter(_)) => return usage(e),
        Err(e) => return Err(e),
    };
    eprintln!("training for {} epochs...", args.epochs);
    let outcome = match train(&dataset, &train_config) {
        Ok(o) => o,
        Err(e @ Error::InvalidInput(_)) | Err(e @ Error::InvalidParameter(_)) => return usage(e),
        Err(e) => return Err(e),
    };
    // Persist before gating so downstream steps stay reproducible even
    // when the gates fail.
    outcome.model.save(&args.out)?;

    let holdout_seed = args.seed ^ 0x56A1_1DA7;
    let report = validate(
        &outcome.model,
        args.validate_points,
        args.validate_draws,
        &sampling,
        holdout_seed,
    )?;
    println!(
        "validation: mean_abs_err={:.5} max_abs_err={:.5} over {} held-out points",
        report.mean_abs_err, report.max_abs_err, report.n_points
    );
    println!(
        "gates: mean_abs_err <= {GATE_MEAN_ABS_ERR}: {}; max_abs_err <= {GATE_MAX_ABS_ERR}: {}",
        if report.mean_abs_err <= GATE_MEAN_ABS_ERR { "pass" } else { "FAIL" },
        if report.max_abs_err <= GATE_MAX_ABS_ERR { "pass" } else { "FAIL" },
    );
    if report.mean_abs_err > GATE_MEAN_ABS_ERR || report.max_abs_err > GATE_MAX_ABS_ERR {
        eprintln!("model written to {} despite failed gates", args.out.display());
        return Ok(EXIT_GATE);
    }
    Ok(EXIT_OK)
}

fn cmd_infer(args: InferArgs) -> Result<u8> {
    let grid: GridSpec = match args.grid.parse() {
        Ok(g) => g,
        Err(e) => return usage(e),
    };
    let mut config = RunConfig::new("infer", args.seed);
    config
        .set("data", args.data.display())
        .set("grid", &grid)
        .set("smoothing", !args.no_smoothing)
        .set("out", args.out.display());
    match &args.surrogate {
        Some(path) => config.set("surrogate", path.display()),
        None => config
            .set("backend", "oracle")
            .set("oracle-draws", args.oracle_draws),
    };
    config.log();

    let bundle = load_bundle(&args.data)?;
    let model;
    let backend: Box<dyn ProbBackend> = match &args.surrogate {
        Some(path) => {
            model = MlpModel::load(path)?;
            Box::new(SurrogateBackend { model: &model })
        }
        None => Box::new(OracleBackend {
            draws: args.oracle_draws,
            seed: args.seed,
        }),
    };
    let params_list = prior_samples(&grid.prior())?;
    eprintln!(
        "evaluating {} prior samples over {} survey and {} trip-record cells...",
        params_list.len(),
        bundle.demand4.len(),
        bundle.demand_tlc.len()
    );
    let samples = evaluate_samples(
        &params_list,
        &bundle.demand4,
        &bundle.demand_tlc,
        &bundle.attrs,
        &bundle.wages,
        &bundle.wage_dist,
        backend.as_ref(),
        !args.no_smoothing,
    )?;
    write_posterior_csv(&args.out, &samples)?;
    let best = max_likelihood(&samples)?;
    let best_weight = samples
        .iter()
        .filter(|s| s.params == best)
        .map(|s| s.weight)
        .sum::<f64>();
    println!(
        "posterior: {} samples -> {}", samples.len(), args.out.display()
    );
    println!(
        "max likelihood: beta={} sigma={} corTFS={} corFS={} (weight {:.4})",
        best.beta, best.sigma, best.cor_tfs, best.cor_fs, best_weight
    );
    Ok(EXIT_OK)
}

fn cmd_impact(args: ImpactArgs) -> Result<u8> {
    let scenario = match ScenarioSpec::resolve(&args.scenario) {
        Ok(s) => s,
        Err(e @ Error::InvalidInput(_)) | Err(e @ Error::InvalidParameter(_)) => return usage(e),
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_DATA);
        }
    };
    let constants = ImpactConstants {
        miles_per_gallon: args.mpg,
        co2_kg_per_gallon: args.co2_kg_per_gallon,
        transit_fare: args.transit_fare,
        sfhv_occupancy: args.sfhv_occupancy,
    };
    if let Err(e) = constants.validate() {
        return usage(e);
    }
    if args.reps == 0 {
        return usage("--reps must be >= 1");
    }
    if !(args.min_weight.is_finite() && args.min_weight >= 0.0) {
        return usage("--min-weight must be finite and non-negative");
    }
    if !(args.scale.is_finite() && args.scale > 0.0) {
        return usage("--scale must be positive and finite");
    }
    let mut config = RunConfig::new("impact", args.seed);
    config
        .set("data", args.data.display())
        .set("posterior", args.posterior.display())
        .set("scenario", &scenario.name)
        .set("reps", args.reps)
        .set("min-weight", args.min_weight)
        .set("scale", args.scale)
        .set("mpg", constants.miles_per_gallon)
        .set("co2-kg-per-gallon", constants.co2_kg_per_gallon)
        .set("transit-fare", constants.transit_fare)
        .set("sfhv-occupancy", constants.sfhv_occupancy)
        .set("out", args.out.display());
    config.log();

    let bundle = load_bundle(&args.data)?;
    let posterior = read_posterior_csv(&args.posterior)?;
    let outcomes = run_scenario(
        &bundle.demand_tlc,
        &bundle.attrs,
        &bundle.zones,
        &bundle.wages,
        &bundle.wage_dist,
        &scenario.a,
        &scenario.b,
        &posterior,
        args.reps,
        args.min_weight,
        &constants,
        args.seed,
    )?;
    let aggregated = aggregate_posterior(&outcomes)?.scaled(args.scale)?;
    let report = Report::from_impact(&scenario.name, &config.digest(), &aggregated);
    emit_report_json(&args.out, &report)?;
    println!("scenario {}: {} posterior samples -> {}", scenario.name, outcomes.len(), args.out.display());
    for name in IMPACT_METRICS {
        if let Some(s) = report.citywide.get(name) {
            println!(
                "citywide {name}: mean={:.4} std={:.4} ci95=[{:.4}, {:.4}]",
                s.mean, s.std, s.ci95[0], s.ci95[1]
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_report(args: ReportArgs) -> Result<u8> {
    let mut config = RunConfig::new("report", 0);
    config
        .set("in", args.input.display())
        .set(
            "format",
            match args.format {
                FormatArg::Json => "json",
                FormatArg::Csv => "csv",
            },
        )
        .set("out", args.out.display());
    config.log();

    let report = load_report(&args.input)?;
    std::fs::create_dir_all(&args.out)?;
    match args.format {
        FormatArg::Json => {
            let path = args.out.join("report.json");
            emit_report_json(&path, &report)?;
            println!("validated report -> {}", path.display());
        }
        FormatArg::Csv => {
            emit_report_csv(&args.out, &report)?;
            println!(
                "tables citywide.csv, per_zone.csv, per_wage.csv, shift_matrix.csv -> {}",
                args.out.display()
            );
        }
    }
    Ok(EXIT_OK)
}
