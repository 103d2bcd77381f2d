//! `lefo`: generate traces, train leader/follower predictors, certify loss
//! bounds, simulate lossy sessions and benchmark inference.
//!
//! Exit codes: 0 on success, 2 for invalid arguments, configuration or
//! input data, 3 for runtime and numeric failures.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lefo_core::bound_analysis::{sweep_checkpoints, write_certificates_csv, NetworkLoss};
use lefo_core::lefo_game::{
    evaluate_accuracy, even_rows, init_predictors, lefo_train, write_accuracy_csv,
    write_game_report_csv, write_game_report_json, GameError, PredictionSide,
};
use lefo_core::predictor::{read_checkpoint, write_checkpoint, Checkpoint, Predictor};
use lefo_core::sim_harness::{
    emit_report, measure_inference_time, run_session, write_latency_csv, Direction, ReportFormat,
};
use lefo_core::trace_io::{
    apply_deadband, generate_synthetic_trace, parse_trace, train_test_split, write_trace,
    MovementKind, Trace, TraceError,
};

use config::RunConfig;

const CONFIG_FILE: &str = "config.json";
const TRAIN_FILE: &str = "train.csv";
const HOLDOUT_FILE: &str = "holdout.csv";
const LEADER_FILE: &str = "leader.ckpt";
const FOLLOWER_FILE: &str = "follower.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";
const REPORT_JSON: &str = "game_report.json";
const REPORT_CSV: &str = "game_report.csv";

#[derive(Debug, Parser)]
#[command(
    name = "lefo",
    version,
    about = "Leader-follower haptic prediction toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic trace as CSV.
    Gen {
        #[arg(long)]
        kind: MovementKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1000.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both networks and write a run directory.
    Train {
        #[arg(long)]
        trace: PathBuf,
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Certify the loss bound between consecutive checkpoints of a run.
    Bound {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Net::Leader)]
        net: Net,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trace over a lossy channel with a trained run.
    Simulate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Overrides the configured loss probability.
        #[arg(long)]
        loss: Option<f64>,
        /// Overrides the configured channel seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured mean burst length.
        #[arg(long)]
        burst: Option<f64>,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        /// Omit wall-clock latency fields from the report.
        #[arg(long)]
        no_timings: bool,
        /// Report path; `.csv` selects CSV, anything else JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single forward passes of both networks.
    Bench {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step accuracy of both networks on a test trace.
    Accuracy {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Net {
    Leader,
    Follower,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    HumanToRobot,
    RobotToHuman,
    Both,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::HumanToRobot => Direction::HumanToRobot,
            DirectionArg::RobotToHuman => Direction::RobotToHuman,
            DirectionArg::Both => Direction::Both,
        }
    }
}

/// Error tagged with the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Validation(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Malformed trace files are input errors; failing to read them is not.
fn trace_failure(e: TraceError) -> Failure {
    match e {
        TraceError::Io(_) => runtime(e),
        _ => invalid(e),
    }
}

fn game_failure(e: GameError) -> Failure {
    match e {
        GameError::InvalidConfig(_) | GameError::InvalidInput(_) => invalid(e),
        _ => runtime(e),
    }
}

fn load_trace(path: &Path) -> Outcome<Trace> {
    parse_trace(path)
        .map_err(trace_failure)
        .map_err(|f| with_context(f, format!("trace {}", path.display())))
}

fn with_context(f: Failure, ctx: String) -> Failure {
    match f {
        Failure::Validation(e) => Failure::Validation(e.context(ctx)),
        Failure::Runtime(e) => Failure::Runtime(e.context(ctx)),
    }
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    read_checkpoint(path)
        .with_context(|| format!("checkpoint {}", path.display()))
        .map_err(runtime)
}

/// Unreadable config files are runtime failures; bad contents are input
/// errors.
fn config_failure(e: anyhow::Error) -> Failure {
    if e.chain().any(|c| c.is::<std::io::Error>()) {
        runtime(e)
    } else {
        invalid(e)
    }
}

fn load_run_config(run_dir: &Path) -> Outcome<RunConfig> {
    RunConfig::load(&run_dir.join(CONFIG_FILE)).map_err(config_failure)
}

fn snapshot_path(run_dir: &Path, net: &str, iteration: usize) -> PathBuf {
    run_dir
        .join(CHECKPOINT_DIR)
        .join(format!("{net}_{iteration:04}.ckpt"))
}

fn csv_writer(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(runtime)
}

fn gen(kind: MovementKind, n: usize, rate: f64, seed: u64, out: &Path) -> Outcome<()> {
    let trace = generate_synthetic_trace(kind, n, rate, seed).map_err(trace_failure)?;
    write_trace(&trace, out).map_err(runtime)
}

fn train(trace_path: &Path, config: Option<&Path>, out_dir: &Path) -> Outcome<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p).map_err(config_failure)?,
        None => RunConfig::default(),
    };
    let mut trace = load_trace(trace_path)?;
    if let Some(db) = &cfg.deadband {
        trace = apply_deadband(&trace, db);
    }
    let (train, holdout) = train_test_split(&trace, cfg.train_fraction).map_err(trace_failure)?;
    let (leader, follower) =
        init_predictors(&cfg.network, &train, cfg.game.seed).map_err(game_failure)?;
    let outcome = lefo_train(
        leader,
        follower,
        &train,
        &holdout,
        &cfg.game,
        &cfg.sgd,
        &cfg.utility(),
    )
    .map_err(game_failure)?;

    std::fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(runtime)?;
    std::fs::write(
        out_dir.join(CONFIG_FILE),
        serde_json::to_vec_pretty(&cfg).map_err(runtime)?,
    )
    .map_err(runtime)?;
    write_trace(&train, out_dir.join(TRAIN_FILE)).map_err(runtime)?;
    write_trace(&holdout, out_dir.join(HOLDOUT_FILE)).map_err(runtime)?;

    let checkpoint = |predictor: &Predictor| Checkpoint {
        predictor: predictor.clone(),
        seed: cfg.game.seed,
        sgd: cfg.sgd,
    };
    write_checkpoint(&checkpoint(&outcome.leader), out_dir.join(LEADER_FILE)).map_err(runtime)?;
    write_checkpoint(&checkpoint(&outcome.follower), out_dir.join(FOLLOWER_FILE))
        .map_err(runtime)?;
    for snap in &outcome.snapshots {
        for (name, base, net) in [
            ("leader", &outcome.leader, &snap.leader),
            ("follower", &outcome.follower, &snap.follower),
        ] {
            let p = base.with_net(net.clone()).map_err(runtime)?;
            write_checkpoint(
                &checkpoint(&p),
                snapshot_path(out_dir, name, snap.iteration),
            )
            .map_err(runtime)?;
        }
    }
    write_game_report_json(&outcome.report, out_dir.join(REPORT_JSON)).map_err(runtime)?;
    write_game_report_csv(&outcome.report, csv_writer(&out_dir.join(REPORT_CSV))?)
        .map_err(runtime)?;
    println!(
        "trained {} iterations (converged: {}), run written to {}",
        outcome.report.iterations_used,
        outcome.report.converged,
        out_dir.display()
    );
    Ok(())
}

fn bound(run_dir: &Path, net: Net, out: &Path) -> Outcome<()> {
    let cfg = load_run_config(run_dir)?;
    let name = match net {
        Net::Leader => "leader",
        Net::Follower => "follower",
    };
    let train = load_trace(&run_dir.join(TRAIN_FILE))?;
    let mut snapshots = Vec::new();
    let mut template = None;
    for iteration in 0.. {
        let path = snapshot_path(run_dir, name, iteration);
        if !path.exists() {
            break;
        }
        let ckpt = load_checkpoint(&path)?;
        snapshots.push(ckpt.predictor.net().to_flat());
        template.get_or_insert(ckpt.predictor);
    }
    let predictor = template.ok_or_else(|| {
        invalid(anyhow!(
            "no {name} checkpoints under {}",
            run_dir.join(CHECKPOINT_DIR).display()
        ))
    })?;
    let data = predictor.dataset(&train).map_err(invalid)?;
    let rows = even_rows(data.len(), cfg.game.utility_batch);
    let certificates = sweep_checkpoints(
        &snapshots,
        |_| NetworkLoss::new(predictor.net().clone(), &data, rows.clone()),
        &cfg.bound,
    )
    .map_err(runtime)?;
    write_certificates_csv(&certificates, csv_writer(out)?).map_err(runtime)?;
    let holding = certificates.iter().filter(|c| c.holds).count();
    println!(
        "{holding} of {} certificates hold; written to {}",
        certificates.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    trace_path: &Path,
    run_dir: &Path,
    loss: Option<f64>,
    seed: Option<u64>,
    burst: Option<f64>,
    direction: Option<DirectionArg>,
    no_timings: bool,
    out: &Path,
) -> Outcome<()> {
    let cfg = load_run_config(run_dir)?;
    let mut channel = cfg.channel;
    if let Some(p) = loss {
        channel.loss_probability = p;
    }
    if let Some(s) = seed {
        channel.seed = s;
    }
    if let Some(b) = burst {
        channel.burst_length_mean = b;
    }
    if let Some(d) = direction {
        channel.direction = d.into();
    }
    channel.validate().map_err(invalid)?;
    let trace = load_trace(trace_path)?;
    let leader = load_checkpoint(&run_dir.join(LEADER_FILE))?.predictor;
    let follower = load_checkpoint(&run_dir.join(FOLLOWER_FILE))?.predictor;
    let mut report = run_session(&trace, &leader, &follower, &channel).map_err(runtime)?;
    if no_timings {
        report = report.without_timings();
    }
    let format = match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => ReportFormat::Csv,
        _ => ReportFormat::Json,
    };
    emit_report(&report, out, format).map_err(runtime)?;
    for l in &report.links {
        println!(
            "{}: {} drops ({:.4})",
            l.link.as_str(),
            l.drop_count,
            l.drop_rate
        );
    }
    Ok(())
}

fn bench(run_dir: &Path, trials: usize, warmup: usize, out: &Path) -> Outcome<()> {
    let mut rows = Vec::new();
    for (name, file) in [("leader", LEADER_FILE), ("follower", FOLLOWER_FILE)] {
        let net = load_checkpoint(&run_dir.join(file))?
            .predictor
            .net()
            .clone();
        let stats = measure_inference_time(&net, trials, warmup).map_err(invalid)?;
        println!(
            "{name} ({} layers): mean {:.4} ms, p95 {:.4} ms",
            net.depth(),
            stats.mean_ms,
            stats.p95_ms
        );
        rows.push((name, stats));
    }
    write_latency_csv(&rows, csv_writer(out)?).map_err(runtime)
}

fn accuracy(run_dir: &Path, trace_path: &Path, out: &Path) -> Outcome<()> {
    let test = load_trace(trace_path)?;
    let mut reports = Vec::new();
    for (file, side) in [
        (LEADER_FILE, PredictionSide::LeaderPredictingRobot),
        (FOLLOWER_FILE, PredictionSide::FollowerPredictingHuman),
    ] {
        let predictor = load_checkpoint(&run_dir.join(file))?.predictor;
        let report = evaluate_accuracy(&predictor, &test, side).map_err(game_failure)?;
        if let Some(m) = report.mean_accuracy() {
            println!("{}: mean accuracy {m:.3}%", side.as_str());
        }
        reports.push(report);
    }
    write_accuracy_csv(&reports, csv_writer(out)?).map_err(runtime)
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Gen {
            kind,
            n,
            rate,
            seed,
            out,
        } => gen(kind, n, rate, seed, &out),
        Command::Train {
            trace,
            config,
            out_dir,
        } => train(&trace, config.as_deref(), &out_dir),
        Command::Bound { run_dir, net, out } => bound(&run_dir, net, &out),
        Command::Simulate {
            trace,
            run_dir,
            loss,
            seed,
            burst,
            direction,
            no_timings,
            out,
        } => simulate(
            &trace, &run_dir, loss, seed, burst, direction, no_timings, &out,
        ),
        Command::Bench {
            run_dir,
            trials,
            warmup,
            out,
        } => bench(&run_dir, trials, warmup, &out),
        Command::Accuracy {
            run_dir,
            trace,
            out,
        } => accuracy(&run_dir, &trace, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Validation(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
