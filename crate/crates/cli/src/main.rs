use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use floorgen::pipeline::{Precision, RunConfig};

mod commands;
mod overrides;

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "floorgen",
    version,
    about = "Footprint- and brief-conditioned floorplan generation"
)]
struct Cli {
    /// JSON run config; replaces the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Full)]
    profile: Profile,
    /// Output directory; falls back to FLOORGEN_OUT, then the config.
    #[arg(long, global = true, env = "FLOORGEN_OUT")]
    out: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Config field override, e.g. `--set stage1.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=JSON")]
    sets: Vec<String>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as JSON.
    Config {
        /// Also write it to this file.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Render the procedural dataset.
    Dataset {
        #[arg(long)]
        n: Option<usize>,
        /// Also render 256-pixel companions.
        #[arg(long)]
        hires: bool,
    },
    /// Train stage 1 (codec and U-Net) or stage 2 (control branch).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint for stage 2; defaults to the one under the output dir.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Generate plans for one brief and footprint.
    Sample {
        #[arg(long)]
        prompt: String,
        /// Footprint PNG; white is inside the lot.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Denoising steps; defaults to T.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FID, KID, SSIM and PSNR of generated plans against held-out ones.
    Eval {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        extractor_seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mid-block embeddings over every brief and footprint, projected by PCA.
    Embed {
        #[arg(long, default_value_t = 1600)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fidelity against the number of denoising steps.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "5,10,25,50")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        /// Also write every sampled image.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the rating game and generation studio over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Real plans; defaults to `eval/real` under the output dir.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Generated plans; defaults to `eval/generated`.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Event log; defaults to `service/events.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Config { write } => commands::config(&cfg, write.as_deref()),
        Command::Dataset { n, hires } => commands::dataset(cfg, n, hires),
        Command::Train { stage: 1, .. } => commands::train_stage1(&cfg),
        Command::Train { from, .. } => commands::train_stage2(&cfg, from),
        Command::Sample {
            prompt,
            mask,
            steps,
            n,
            checkpoint,
        } => commands::sample(&cfg, &prompt, mask.as_deref(), steps, n, checkpoint),
        Command::Eval {
            steps,
            split,
            limit,
            extractor_seed,
            checkpoint,
        } => commands::eval(&cfg, steps, split, limit, extractor_seed, checkpoint),
        Command::Embed { n, steps, checkpoint } => commands::embed(&cfg, n, steps, checkpoint),
        Command::Sweep {
            steps,
            seeds,
            split,
            limit,
            dump,
            checkpoint,
        } => commands::sweep(&cfg, &steps, seeds, split, limit, dump, checkpoint),
        Command::Serve {
            addr,
            real,
            generated,
            log,
            checkpoint,
        } => commands::serve(&cfg, addr, real, generated, log, checkpoint),
    }
}

/// Profile or file, then `--set` overrides, then the dedicated flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => match cli.profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Full => RunConfig::default(),
        },
    };
    if !cli.sets.is_empty() {
        cfg = overrides::apply(&cfg, &cli.sets)?;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.precision {
        Some(PrecisionArg::F32) => cfg.precision = Precision::F32,
        Some(PrecisionArg::F64) => cfg.precision = Precision::F64,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}
