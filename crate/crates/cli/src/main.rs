mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, PipelineConfig, SCHEMA};

#[derive(Parser)]
#[command(name = "sitool", version, about = "Post-training pruning with sparsity induction", after_long_help = SCHEMA)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded toy model and matching synthetic calibration set.
    MakeToy(Overrides),
    /// Learn scales and shifts, then write the absorbed model, transforms, masks and trace.
    Induce(Overrides),
    /// Score, mask and apply; write the pruned model and sparsity report.
    Prune(Overrides),
    /// Compare pruning with and without induction; write distortion and score histograms.
    Eval(Overrides),
    /// Time classical against fast importance refresh.
    Bench(Overrides),
}

#[derive(Args, Default)]
struct Overrides {
    /// Config file of `key = value` lines (see --help for keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// depth,d_model,d_hidden
    #[arg(long)]
    toy: Option<String>,
    #[arg(long)]
    calib: Option<String>,
    #[arg(long = "calib-synth")]
    calib_synth: Option<String>,
    /// Sparsity rate such as 0.5, or n:m such as 2:4.
    #[arg(long)]
    pattern: Option<String>,
    /// magnitude | wanda | wanda-fast
    #[arg(long)]
    metric: Option<String>,
    /// off | distribution | feature | both
    #[arg(long)]
    si: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Norm order >= 1, or `spectral`.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("model", &self.model),
            ("toy", &self.toy),
            ("calib", &self.calib),
            ("calib_synth", &self.calib_synth),
            ("pattern", &self.pattern),
            ("metric", &self.metric),
            ("si.stage", &self.si),
            ("si.epochs", &self.epochs),
            ("si.lr", &self.lr),
            ("si.lambda", &self.lambda),
            ("si.alpha", &self.alpha),
            ("si.p", &self.p),
            ("seed", &self.seed),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn init_threads() -> Result<(), ConfigError> {
    let Ok(v) = std::env::var("SI_THREADS") else {
        return Ok(());
    };
    let bad = |message: String| ConfigError {
        key: "SI_THREADS".into(),
        message,
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| bad(format!("expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| bad(e.to_string()))
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    init_threads()?;
    match cli.command {
        Command::MakeToy(o) => commands::make_toy(&o.resolve()?),
        Command::Induce(o) => commands::induce(&o.resolve()?),
        Command::Prune(o) => commands::prune(&o.resolve()?),
        Command::Eval(o) => commands::eval(&o.resolve()?),
        Command::Bench(o) => commands::bench(&o.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
