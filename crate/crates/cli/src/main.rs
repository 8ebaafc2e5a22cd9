use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mewlw_core::data::{check_dataset, load_study, Role, Schema, StudyDataset, TimeScale};
use mewlw_core::inference::GammaJacobian;
use mewlw_core::me_model::PredictorSet;
use mewlw_core::pipeline::{run_fit, Design, FitOptions};
use mewlw_core::sim::{self, SimConfig, RNG_SCHEME};
use mewlw_core::weights::{build_weight_table, write_weight_table};
use mewlw_core::{Error, Ties};

#[derive(Parser)]
#[command(name = "mewlw", version, about = "Measurement-error-corrected marginal Cox regression")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the corrected model to a main and a validation study.
    Fit(FitArgs),
    /// Run a Monte Carlo study from a key = value config file.
    Simulate(SimulateArgs),
    /// Validate a study file and print a summary.
    Check(CheckArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum DesignArg {
    Evs,
    IvsFull,
    IvsPooled,
}

#[derive(Copy, Clone, ValueEnum)]
enum TiesArg {
    Breslow,
    Efron,
}

#[derive(Copy, Clone, ValueEnum)]
enum JacobianArg {
    Analytic,
    Fd,
}

#[derive(Copy, Clone, ValueEnum)]
enum RoleArg {
    Main,
    Validation,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    main: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "evs")]
    design: DesignArg,
    #[arg(long, value_enum, default_value = "efron")]
    ties: TiesArg,
    /// Expected number of event types.
    #[arg(long)]
    events: Option<usize>,
    /// Error-model predictors, e.g. "self_report,z,t".
    #[arg(long, default_value = "self_report,z,t")]
    me_predictors: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recorded in the provenance block; the fit itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// Ticks per time unit for exact tie detection.
    #[arg(long, default_value_t = 1)]
    ticks_per_unit: i64,
    /// How dU/dgamma is computed.
    #[arg(long, value_enum, default_value = "analytic")]
    gamma_jacobian: JacobianArg,
    /// Also dump the main-study weight table as CSV.
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `replicates` in the config.
    #[arg(long)]
    reps: Option<usize>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    file: PathBuf,
    #[arg(long, value_enum, default_value = "main")]
    role: RoleArg,
    #[arg(long, default_value_t = 1)]
    ticks_per_unit: i64,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_numerical() { 2 } else { 1 }, message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn io_context(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| input_error(format!("{}: {e}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn provenance(seed: u64, config_hash: String) -> Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_hash": config_hash,
        "rng": RNG_SCHEME,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| input_error(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_context(path))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(input_error("--threads must be positive"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| input_error(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn load(path: &Path, role: Role, scale: TimeScale) -> Result<StudyDataset, Failure> {
    let schema = Schema { scale, ..Schema::default() };
    load_study(path, role, &schema).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let main_path = args.main.as_deref().ok_or_else(|| input_error("fit requires --main"))?;
    let valid_path = args.valid.as_deref().ok_or_else(|| input_error("fit requires --valid"))?;
    let out = args.out.as_deref().ok_or_else(|| input_error("fit requires --out"))?;
    let scale = TimeScale::new(args.ticks_per_unit)?;
    let predictors = PredictorSet::parse(&args.me_predictors)?;
    let opts = FitOptions {
        design: match args.design {
            DesignArg::Evs => Design::Evs,
            DesignArg::IvsFull => Design::IvsFull,
            DesignArg::IvsPooled => Design::IvsPooled,
        },
        ties: match args.ties {
            TiesArg::Breslow => Ties::Breslow,
            TiesArg::Efron => Ties::Efron,
        },
        predictors,
        gamma_jacobian: match args.gamma_jacobian {
            JacobianArg::Analytic => GammaJacobian::Analytic,
            JacobianArg::Fd => GammaJacobian::FiniteDifference,
        },
        events: args.events,
    };

    let main = load(main_path, Role::Main, scale)?;
    let validation = load(valid_path, Role::Validation, scale)?;
    let analysis = with_threads(args.threads, || run_fit(&main, &validation, &opts))??;

    if let Some(path) = &args.weights_out {
        let table = build_weight_table(&main, &analysis.me, false)?;
        let file = File::create(path).map_err(io_context(path))?;
        write_weight_table(&table, &main, BufWriter::new(file))?;
    }

    let mut hasher = Sha256::new();
    let run = json!({
        "design": opts.design,
        "ties": opts.ties,
        "events": args.events,
        "me_predictors": args.me_predictors,
        "ticks_per_unit": args.ticks_per_unit,
        "gamma_jacobian": opts.gamma_jacobian,
    });
    hasher.update(run.to_string().as_bytes());
    for p in [main_path, valid_path] {
        hasher.update(fs::read(p).map_err(io_context(p))?);
    }
    let hash: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();

    let mut doc = analysis.to_json();
    doc["provenance"] = provenance(args.seed, hash);
    write_json(out, &doc)?;
    let se: Vec<f64> = analysis.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    for ((label, b), s) in analysis.labels().iter().zip(analysis.beta.iter()).zip(&se) {
        eprintln!("{label}: beta = {b:.4} (SE {s:.4}), HR = {:.3}", b.exp());
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config).map_err(io_context(&args.config))?;
    let mut config = SimConfig::parse(&text)?;
    if let Some(r) = args.reps {
        config.replicates = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if config.replicates == 0 {
        return Err(input_error("replicate count must be positive (--reps)"));
    }
    let total = config.replicates;
    let step = (total / 10).max(1);
    let results = with_threads(args.threads, || {
        sim::run_simulation_with(&config, |done| {
            if done % step == 0 || done == total {
                log::info!("{done}/{total} replicates");
            }
        })
    })??;
    let summary = sim::summarize(&results, &config.beta)?;
    if summary.n_failed > 0 {
        log::warn!("{} of {total} replicates failed and were excluded", summary.n_failed);
    }

    let prefix = args.out_prefix.to_string_lossy().into_owned();
    let csv_path = PathBuf::from(format!("{prefix}_summary.csv"));
    let file = File::create(&csv_path).map_err(io_context(&csv_path))?;
    sim::write_summary_csv(&summary, BufWriter::new(file))?;

    let mut doc = sim::replicates_json(&config, &results, &summary);
    let hash = sha256_hex(format!("{text}\nreplicates={}\nseed={}", config.replicates, config.seed).as_bytes());
    doc["provenance"] = provenance(config.seed, hash);
    write_json(&PathBuf::from(format!("{prefix}_replicates.json")), &doc)?;
    eprintln!(
        "{} successful replicates, {} failed; summary in {}",
        summary.n_success,
        summary.n_failed,
        csv_path.display()
    );
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), Failure> {
    let role = match args.role {
        RoleArg::Main => Role::Main,
        RoleArg::Validation => Role::Validation,
    };
    let data = load(&args.file, role, TimeScale::new(args.ticks_per_unit)?)?;
    let report = check_dataset(&data);
    println!("{} subjects, {} event types ({:?})", report.n_subjects, report.n_events, report.role);
    for e in &report.events {
        let truth = e
            .true_cases
            .map(|c| format!(", {c} true cases"))
            .unwrap_or_default();
        println!(
            "event {}: {} subjects, {} reported cases{truth}, censored fraction {:.3}, {} covariates, {} raw predictors",
            e.event, e.n_subjects, e.reported_cases, e.censored_fraction, e.covariate_dim, e.predictor_dim
        );
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(input_error(format!("{} violation(s) found", report.violations.len())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
