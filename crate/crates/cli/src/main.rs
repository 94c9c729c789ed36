//! `gcm`: fit, simulate, evaluate and predict with generalized cascade click
//! models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 fit stopped at
//! `--max-iter` without converging (outputs are still written).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcm::em::{fit, log_likelihood, ConstantSolver, FitOptions};
use gcm::evaluation::{align_items, check_schema, perplexity, predict_click_probs, recovery_error, PerplexityReport, RecoveryReport};
use gcm::io::{load_json, load_model, load_sessions, plot_data, save_json, save_model, save_sessions, write_json_lines, write_trace};
use gcm::models::{build_czm, build_ubm, parse_definition};
use gcm::simulator::{simulate, GroundTruth, ModelKind, SimulationConfig};
use gcm::{GcmError, ModelDefinition, SessionLog};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "gcm", version, about = "Generalized cascade click models fitted by EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a built-in or custom model to a session log.
    Fit(FitArgs),
    /// Generate a synthetic log with known parameters.
    Simulate(SimulateArgs),
    /// Score fitted models on a log.
    Evaluate(EvaluateArgs),
    /// Per-position click probabilities for every session.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    /// Every activation at 0.5.
    Default,
    /// Random weights drawn from `--seed`.
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    ClosedForm,
    Numeric,
}

#[derive(Args)]
struct FitArgs {
    /// `czm`, `ubm`, or a path to a model definition file.
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
    /// Fitted model (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration trace (JSON lines); defaults to `<out>.trace.jsonl`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    init: Init,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Worker threads; 1 gives bit-exact reruns (any fixed count does too).
    #[arg(long)]
    threads: Option<usize>,
    /// Update rule for covariate-free constant parameters.
    #[arg(long, value_enum, default_value = "closed-form")]
    constant_solver: SolverArg,
}

#[derive(Args)]
struct SimulateArgs {
    /// `czm` or `ubm`.
    #[arg(long, default_value = "czm")]
    model: ModelKind,
    /// Session log (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Ground truth (JSON); defaults to `<out>.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 20_000)]
    users: usize,
    /// Warm-up sessions used to estimate item popularity.
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    list_size: usize,
    #[arg(long, default_value_t = 1.0)]
    distance_sensitivity: f64,
    #[arg(long, default_value_t = 5.0)]
    attraction_salience: f64,
    #[arg(long, default_value_t = 5.0)]
    satisfaction_salience: f64,
    /// Success probability of the geometric sessions-per-user draw.
    #[arg(long, default_value_t = 0.5)]
    lifetime_p: f64,
    #[arg(long, default_value_t = 0.9)]
    continuation: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fitted model file; repeat to compare several models.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Simulator ground truth for parameter-recovery errors.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Plot data (TSV); defaults to `<out>.plot.tsv`.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Predictions (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(GcmError),
}

impl From<GcmError> for Failure {
    fn from(e: GcmError) -> Self {
        match e {
            GcmError::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Data(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_log(path: &Path) -> Result<SessionLog, Failure> {
    let log = load_sessions(path)?;
    if log.is_empty() {
        return Err(Failure::Usage(format!("{} holds no sessions", path.display())));
    }
    Ok(log)
}

fn resolve_model(name: &str, log: &SessionLog) -> Result<ModelDefinition, Failure> {
    match name.to_ascii_lowercase().as_str() {
        "czm" => Ok(build_czm(log.list_size, log.item_count())?),
        "ubm" => Ok(build_ubm(log.list_size, log.item_count())?),
        _ => {
            let path = Path::new(name);
            if !path.exists() {
                return Err(Failure::Usage(format!(
                    "unknown model `{name}`: expected czm, ubm or a definition file"
                )));
            }
            Ok(parse_definition(&fs::read_to_string(path)?)?)
        }
    }
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    let log = read_log(&a.data)?;
    let def = resolve_model(&a.model, &log)?;
    let options = FitOptions {
        epsilon: a.epsilon,
        max_iter: a.max_iter,
        threads: a.threads,
        constant_solver: match a.constant_solver {
            SolverArg::ClosedForm => ConstantSolver::ClosedForm,
            SolverArg::Numeric => ConstantSolver::Numeric,
        },
        initial: match a.init {
            Init::Default => None,
            Init::Random => Some(def.random_weights(a.seed)),
        },
        ..Default::default()
    };
    log::info!("fitting {} on {} sessions", def.name, log.len());
    let model = fit(&def, &log, &options)?;
    save_model(&model, &a.out)?;
    let trace = a.trace.unwrap_or_else(|| with_suffix(&a.out, ".trace.jsonl"));
    write_trace(&model.report, fs::File::create(&trace)?)?;
    let r = &model.report;
    eprintln!(
        "{}: {} iterations, log-likelihood {:.6}, {}",
        def.name,
        r.iterations,
        r.final_loglik(),
        if r.converged { "converged" } else { "not converged" }
    );
    Ok(if r.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NOT_CONVERGED)
    })
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let config = SimulationConfig {
        items: a.items,
        users: a.users,
        warmup_sessions: a.warmup,
        list_size: a.list_size,
        distance_sensitivity: a.distance_sensitivity,
        attraction_salience: a.attraction_salience,
        satisfaction_salience: a.satisfaction_salience,
        lifetime_geometric_p: a.lifetime_p,
        continuation_probability: a.continuation,
        seed: a.seed,
    };
    config.validate()?;
    let (log, truth) = simulate(&config, a.model)?;
    save_sessions(&log, &a.out)?;
    save_json(&truth, &a.truth.unwrap_or_else(|| with_suffix(&a.out, ".truth.json")))?;
    eprintln!("{}: {} sessions over {} items", a.model, log.len(), log.item_count());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ModelEvaluation {
    name: String,
    path: String,
    loglik: f64,
    perplexity: PerplexityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    recovery: Option<RecoveryReport>,
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let run = || -> CmdResult {
        let log = read_log(&a.data)?;
        let truth: Option<GroundTruth> = a.truth.as_deref().map(load_json).transpose()?;
        let mut reports = Vec::new();
        for path in &a.model {
            let model = load_model(path)?;
            let aligned = align_items(&model, &log);
            check_schema(&model, &aligned)?;
            // A truth from a different model family has no matching table.
            let recovery = match truth.as_ref().map(|t| recovery_error(&model, t)) {
                Some(Err(GcmError::Schema(m))) => {
                    log::warn!("skipping recovery for {}: {m}", path.display());
                    None
                }
                other => other.transpose()?,
            };
            reports.push(ModelEvaluation {
                name: model.definition.name.clone(),
                path: path.display().to_string(),
                loglik: log_likelihood(&model, &aligned)?,
                perplexity: perplexity(&model, &aligned)?,
                recovery,
            });
        }
        save_json(&reports, &a.out)?;
        let series: Vec<(&str, &PerplexityReport)> = reports.iter().map(|r| (r.name.as_str(), &r.perplexity)).collect();
        fs::write(a.plot.clone().unwrap_or_else(|| with_suffix(&a.out, ".plot.tsv")), plot_data(&series))?;
        for r in &reports {
            eprintln!("{}: overall perplexity {:.6}", r.name, r.perplexity.overall);
        }
        Ok(ExitCode::SUCCESS)
    };
    match a.threads {
        // Perplexity reductions run in a fixed order, so the thread count
        // bounds parallelism without changing any number.
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Usage(e.to_string()))?
            .install(run),
        None => run(),
    }
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    probs: Vec<f64>,
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let log = align_items(&model, &read_log(&a.data)?);
    check_schema(&model, &log)?;
    let preds = log
        .sessions
        .iter()
        .map(|s| {
            Ok(Prediction {
                id: &s.id,
                probs: predict_click_probs(&model, s)?,
            })
        })
        .collect::<Result<Vec<_>, GcmError>>()?;
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    write_json_lines(&preds, &mut w)?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
