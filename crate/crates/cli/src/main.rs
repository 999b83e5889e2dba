use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qpack::checkpoint::Checkpoint;
use qpack::config::{Mode, RunConfig};
use qpack::quant::WeightCoding;
use qpack::report::{self, Summary};
use qpack::runner::{self, RunOptions, RunOutcome, RunStatus};
use qpack::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CAPACITY: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

#[derive(Parser)]
#[command(name = "qpack", version, about = "Forget-free continual learning with pruned, quantized sub-networks")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of a scenario from scratch.
    Run(RunArgs),
    /// Continue a run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        /// Stop once this many tasks are committed in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Regenerate the report files from a checkpoint.
    Report {
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print what a checkpoint contains.
    InspectCheckpoint {
        checkpoint: PathBuf,
        /// Print the run summary as JSON instead.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set prune.population=8.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// full, pruning-only or quantization-only.
    #[arg(long)]
    mode: Option<String>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Stop once this many tasks are committed.
    #[arg(long)]
    stop_after: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::CapacityExhausted { .. }) => EXIT_CAPACITY,
        Some(Error::Checksum { .. } | Error::UnsupportedVersion { .. } | Error::Corrupt(_)) => EXIT_CORRUPT,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run(args) => run(args),
        Command::Resume {
            checkpoint,
            stop_after,
        } => {
            let outcome = runner::resume(&checkpoint, &RunOptions { stop_after })
                .with_context(|| format!("resuming {}", checkpoint.display()))?;
            Ok(finish(&outcome))
        }
        Command::Report {
            checkpoint,
            output_dir,
        } => {
            let cp = load(&checkpoint)?;
            let dir = output_dir.unwrap_or_else(|| parent(&checkpoint));
            let summary = report::write_reports(&dir, &cp, mode_of(&cp)?)?;
            print_summary(&summary);
            println!("reports written to {}", dir.display());
            Ok(0)
        }
        Command::InspectCheckpoint { checkpoint, json } => {
            let cp = load(&checkpoint)?;
            if json {
                let summary = report::summarize(&cp, mode_of(&cp)?)?;
                print!("{}", report::summary_json(&summary)?);
            } else {
                inspect(&cp);
            }
            Ok(0)
        }
    }
}

fn run(args: RunArgs) -> Result<u8> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text, &args.overrides)?;
    if let Some(m) = &args.mode {
        cfg.run.mode = m.parse::<Mode>()?;
    }
    if let Some(dir) = args.output_dir {
        cfg.run.output_dir = dir;
    }
    cfg.validate()?;
    let outcome = runner::run(
        &cfg,
        &RunOptions {
            stop_after: args.stop_after,
        },
    )?;
    Ok(finish(&outcome))
}

fn finish(outcome: &RunOutcome) -> u8 {
    if let Some(s) = &outcome.summary {
        print_summary(s);
    }
    let ckpt = outcome.output_dir.join(runner::CHECKPOINT_FILE);
    match &outcome.status {
        RunStatus::Completed => {
            println!("run complete; outputs in {}", outcome.output_dir.display());
            0
        }
        RunStatus::Stopped => {
            println!("stopped after {} task(s); resume with: qpack resume {}", outcome.checkpoint.tasks.len(), ckpt.display());
            0
        }
        RunStatus::CapacityExhausted {
            task,
            layers,
            detail,
        } => {
            eprintln!(
                "error: capacity exhausted while learning task {task}; saturated layer(s) {layers:?}: {detail}"
            );
            eprintln!("state up to the previous task saved to {}", ckpt.display());
            EXIT_CAPACITY
        }
    }
}

fn print_summary(s: &Summary) {
    println!(
        "{} of {} task(s), mode {}: lifelong accuracy {:.4}, total capacity {:.2}% of dense",
        s.tasks_completed, s.tasks_planned, s.mode, s.lifelong_accuracy, s.capacity_total_percent
    );
    for t in &s.tasks {
        println!(
            "  task {}: {} bits, test accuracy {:.4}, capacity {:.2}%",
            t.task, t.bits, t.final_test_accuracy, t.capacity_percent
        );
    }
    if s.forget_violations.is_empty() {
        println!("  no forgetting detected");
    } else {
        println!("  FORGETTING at (episode, task) {:?}", s.forget_violations);
    }
}

fn inspect(cp: &Checkpoint) {
    println!("format version {}", qpack::checkpoint::VERSION);
    println!("model layers {:?}", cp.spec.layer_sizes());
    println!(
        "scenario {:?}, seed {}, {} task(s) planned",
        cp.manifest.kind, cp.manifest.seed, cp.manifest.n_tasks
    );
    let sp = cp.store.weighted_sparsity();
    println!(
        "store: {} slots, unused fraction per layer {:?}",
        cp.store.total_slots(),
        sp.per_layer
    );
    for r in &cp.tasks {
        let coding = match &r.coding {
            WeightCoding::Raw => "raw 32-bit".to_string(),
            WeightCoding::Codebook(cb) => format!(
                "codebook sizes {:?}",
                cb.layers.iter().map(Vec::len).collect::<Vec<_>>()
            ),
        };
        let usage = cp.store.task_usage(r.task).unwrap_or_default();
        println!(
            "task {}: {} bits, {coding}, slots used {usage:?}, validation accuracy {:.4} (full precision {:.4})",
            r.task,
            r.bits(),
            r.stored_accuracy,
            r.full_accuracy
        );
    }
    for (e, row) in cp.matrix.rows().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
        println!("after task {e}: {}", cells.join(" "));
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn mode_of(cp: &Checkpoint) -> Result<Mode> {
    Ok(RunConfig::parse(&cp.config, &[])?.run.mode)
}

fn parent(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
