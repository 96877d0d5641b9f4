mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(crackseg::Error),
}

impl From<crackseg::Error> for CliError {
    fn from(e: crackseg::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use crackseg::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidArgument(_)) => 2,
            CliError::Core(E::NonFinite(_) | E::Diverged { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "crackseg",
    version,
    about = "Patch-based CNN crack segmentation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file (sectioned key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threshold: Option<f32>,
    /// Evaluation tolerance d in pixels.
    #[arg(long, global = true)]
    tolerance: Option<u32>,
    #[arg(long, global = true, value_parser = ["mean", "global"])]
    norm_mode: Option<String>,
    #[arg(long, global = true, value_parser = ["micro", "macro", "both"])]
    aggregation: Option<String>,
    /// Use the generated corpus instead of a dataset directory.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Dataset root with images/ and masks/.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Split manifest (defaults to <data>/manifest.txt).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Raw override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the training set and print its statistics.
    BuildDataset,
    /// Train a network and write checkpoints and the loss trace.
    Train {
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        structure: Option<usize>,
        #[arg(long)]
        ratio: Option<String>,
    },
    /// Segment images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write raw float grids.
        #[arg(long)]
        raw: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
    },
    /// Train and evaluate one model per structure size.
    SweepStructure {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 5, 7])]
        sizes: Vec<usize>,
    },
    /// Train and evaluate one model per negative:positive ratio.
    SweepRatio {
        #[arg(long, value_delimiter = ',', default_values_t = vec!["1".to_string(), "3".into(), "10".into(), "natural".into()])]
        ratios: Vec<String>,
        #[arg(long)]
        total: usize,
    },
    /// Train on one corpus and evaluate on another.
    CrossTest {
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Train on the first half of both training splits.
        #[arg(long)]
        hybrid: bool,
    },
    /// Write a synthetic dataset directory.
    GenSynthetic {
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long)]
        test_count: Option<usize>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.sampling_seed = seed;
        cfg.train.seed = seed;
        cfg.synthetic_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(t) = common.threshold {
        cfg.threshold = t;
    }
    if let Some(d) = common.tolerance {
        cfg.tolerance = d;
    }
    if let Some(m) = &common.norm_mode {
        cfg.set("inference.norm_mode", m)?;
    }
    if let Some(a) = &common.aggregation {
        cfg.set("evaluation.aggregation", a)?;
    }
    if common.synthetic {
        cfg.synthetic = true;
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.common)?;
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::BuildDataset => commands::build_dataset(&cfg),
        Command::Train {
            iterations,
            resume,
            structure,
            ratio,
        } => {
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if let Some(s) = structure {
                cfg.structure = s;
            }
            if let Some(r) = ratio {
                cfg.set("sampling.ratio", &r)?;
            }
            commands::train(&cfg, resume.as_deref())
        }
        Command::Predict {
            checkpoint,
            raw,
            images,
        } => commands::predict(&cfg, &checkpoint, &images, raw),
        Command::Evaluate { pred_dir, gt_dir } => commands::evaluate(&cfg, &pred_dir, &gt_dir),
        Command::SweepStructure { sizes } => commands::sweep_structure(&cfg, &sizes),
        Command::SweepRatio { ratios, total } => commands::sweep_ratio(&cfg, &ratios, total),
        Command::CrossTest {
            train_data,
            test_data,
            hybrid,
        } => commands::cross_test(&cfg, train_data.as_deref(), test_data.as_deref(), hybrid),
        Command::GenSynthetic { count, test_count } => {
            commands::gen_synthetic(&cfg, count, test_count)
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
