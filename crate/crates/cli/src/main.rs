use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use artsy::checkpoint;
use artsy::config::{ExperimentConfig, GateMode, Method, StreamSource, ThresholdPolicy};
use artsy::data::{gen_gaussian_stream, GaussianStreamSpec};
use artsy::engine::{self, ModelState};
use artsy::format::write_feature_stream;
use artsy::report::emit_report;
use artsy::Error;
use clap::{Parser, Subcommand, ValueEnum};

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "artsy", version, about = "Class-incremental learning with gated adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian task stream on disk.
    GenData(GenDataArgs),
    /// Train and evaluate on a task stream, writing reports and a checkpoint.
    Run(RunArgs),
    /// Summarise a checkpoint.
    Inspect {
        checkpoint: PathBuf,
    },
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long)]
    tasks: usize,
    #[arg(long)]
    classes_per_task: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    within_std: f64,
    /// Classes in the base task (defaults to tasks * classes-per-task).
    #[arg(long)]
    base_classes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Sequential,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateModeArg {
    Learned,
    Oracle,
    Functional,
    Noise,
}

impl From<GateModeArg> for GateMode {
    fn from(m: GateModeArg) -> Self {
        match m {
            GateModeArg::Learned => GateMode::Learned,
            GateModeArg::Oracle => GateMode::Oracle,
            GateModeArg::Functional => GateMode::Functional,
            GateModeArg::Noise => GateMode::Noise,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    gate_mode: Option<GateModeArg>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Feature stream manifest to use instead of the synthetic generator.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, env = "ARTSY_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    eval_threads: Option<usize>,
    #[arg(long)]
    train_with_old_adapters: bool,
    /// Pick gate thresholds on held-out data instead of the fixed 0.5.
    #[arg(long)]
    calibrated: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Run(args) => run(&args),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Generation(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn gen_data(args: &GenDataArgs) -> artsy::Result<()> {
    let spec = GaussianStreamSpec {
        num_tasks: args.tasks,
        classes_per_task: args.classes_per_task,
        dim: args.dim,
        samples_per_class: args.samples_per_class,
        separation: args.separation,
        within_std: args.within_std,
        base_classes: args.base_classes,
    };
    spec.validate()?;
    let stream = gen_gaussian_stream(args.seed, &spec)?;
    let manifest = write_feature_stream(&stream, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn effective_config(args: &RunArgs) -> artsy::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.gate_mode {
        cfg.gate.mode = mode.into();
    }
    if args.baseline.is_some() {
        cfg.method = Method::Sequential;
    }
    if let Some(path) = &args.data {
        cfg.stream = StreamSource::Manifest(path.clone());
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = args.eval_threads {
        cfg.eval_threads = n;
    }
    if args.train_with_old_adapters {
        cfg.adapter.train_with_old_adapters = true;
    }
    if args.calibrated {
        cfg.gate.threshold = ThresholdPolicy::Calibrated;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> artsy::Result<()> {
    let cfg = effective_config(args)?;
    // Loading validates the stream, so a bad manifest fails before any output exists.
    let stream = engine::load_stream(&cfg)?;
    let outcome = engine::run(&stream, &cfg)?;
    let mut written = emit_report(&outcome.report, &cfg.out_dir)?;
    if let Some(state) = &outcome.state {
        let path = cfg.out_dir.join(CHECKPOINT_FILE);
        checkpoint::save(state, &path)?;
        written.push(path);
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "last {} avg {}",
        fmt(outcome.report.last_final()),
        fmt(outcome.report.avg_final())
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn inspect(path: &Path) -> artsy::Result<()> {
    let state = checkpoint::load(path)?;
    print!("{}", summary(&state));
    Ok(())
}

fn summary(state: &ModelState) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "embed_dim: {}", state.embed_dim());
    let _ = writeln!(s, "adapters: {}", state.adapters.len());
    let _ = writeln!(s, "gates: {}", state.gates.len());
    let _ = writeln!(s, "prototypes: {}", state.prototypes.len());
    let _ = writeln!(s, "parameters:");
    let _ = writeln!(s, "  backbone: {}", state.backbone.num_params());
    let adapters: usize = state.adapters.iter().map(|a| a.num_params()).sum();
    let gates: usize = state.gates.iter().map(|g| g.num_params()).sum();
    let _ = writeln!(s, "  adapters: {adapters}");
    let _ = writeln!(s, "  gates: {gates}");
    let _ = writeln!(s, "  total: {}", state.num_params());
    let _ = writeln!(s, "prototypes per task:");
    for (task, n) in state.prototypes.per_task_counts() {
        let _ = writeln!(s, "  task {task}: {n}");
    }
    let _ = writeln!(s, "checksums:");
    for (name, sum) in state.component_checksums() {
        let _ = writeln!(s, "  {name}: {sum}");
    }
    s
}
