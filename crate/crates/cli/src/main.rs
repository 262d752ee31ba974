//! `lulc`: command-line driver for the land-cover pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lulc_core::config::{self, PipelineConfig, SEED_ENV};
use lulc_core::pipeline::{Pipeline, Stage};
use lulc_core::Error;

const EXIT_TABLE: &str = "\
EXIT CODES:
  0  success
  1  unexpected failure
  2  usage or configuration error
  3  missing or stale input artifact (the message names the stage to run)
  4  I/O error
  5  malformed data or file format
  6  numerical failure (non-finite loss, degenerate variance)";

fn long_help() -> String {
    format!(
        "{EXIT_TABLE}\n\n\
         CONFIG KEYS (set in the --config file or with --set KEY=VALUE; defaults shown):\n{}\n\n\
         Precedence: stage flags > --set > config file > defaults. \
         Seed: --seed > `seed` in the file > ${SEED_ENV} > {}.",
        config::describe_keys(),
        config::DEFAULT_SEED
    )
}

#[derive(Parser, Debug)]
#[command(name = "lulc", version, about = "Land-use / land-cover tile classification pipeline")]
#[command(after_long_help = long_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Pipeline config (TOML). Without one, built-in defaults are used.
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "PATH")]
    work_dir: Option<PathBuf>,
    /// Timing source.
    #[arg(long, global = true)]
    clock: Option<ClockArg>,
    /// Override any config key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ClockArg {
    Monotonic,
    Tick,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic labeled scenes and their catalog.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Filter the scene catalog by date window and cloud cover.
    Ingest {
        #[arg(long, value_name = "PATH")]
        catalog: Option<PathBuf>,
        #[arg(long)]
        max_cloud_pct: Option<f64>,
        #[arg(long, value_name = "YYYY-MM-DD")]
        start_date: Option<String>,
        #[arg(long, value_name = "YYYY-MM-DD")]
        end_date: Option<String>,
    },
    /// Mask selected scenes and cut them into chips.
    Tile {
        #[arg(long, value_name = "PATH")]
        roi: Option<PathBuf>,
        #[arg(long)]
        tile_size: Option<usize>,
    },
    /// Compute per-channel normalization statistics.
    Stats,
    /// Stratified train / validation / test split.
    Split,
    /// Train the classifier with early stopping.
    Train {
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Evaluate the trained model on the test split.
    Eval,
    /// Predict, suppress, smooth and stitch one scene.
    Infer {
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        filter_passes: Option<usize>,
        #[arg(long)]
        scene: Option<String>,
    },
    /// Time training and inference on this host.
    Bench {
        #[arg(long)]
        device_name: Option<String>,
        #[arg(long)]
        warmup_epochs: Option<usize>,
        #[arg(long)]
        measured_epochs: Option<usize>,
    },
    /// Build the speed-up report and chart data.
    Report {
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_name = "epoch_time|train_it_s")]
        basis: Option<String>,
    },
    /// Write the GeoJSON overlay and HTML map.
    Map,
    /// Run a range of stages in order.
    Run {
        /// First stage (default: synth, or ingest when a catalog is configured).
        #[arg(long)]
        from: Option<String>,
        /// Last stage.
        #[arg(long, default_value = "map")]
        to: String,
    },
    /// Check a config and print it with every default filled in.
    Validate,
}

fn quoted(s: &str) -> String {
    format!("{s:?}")
}

fn path_str(p: &std::path::Path) -> String {
    quoted(&p.to_string_lossy())
}

/// Stage flags as `(key, value)` overrides.
fn stage_overrides(cmd: &Command) -> Vec<(&'static str, Option<String>)> {
    let num = |v: Option<f64>| v.map(|x| format!("{x:?}"));
    let int = |v: Option<usize>| v.map(|x| x.to_string());
    match cmd {
        Command::Synth { scenes, width, height } => vec![
            ("synth.scenes", int(*scenes)),
            ("synth.width", int(*width)),
            ("synth.height", int(*height)),
        ],
        Command::Ingest {
            catalog,
            max_cloud_pct,
            start_date,
            end_date,
        } => vec![
            ("paths.catalog", catalog.as_deref().map(path_str)),
            ("ingest.max_cloud_pct", num(*max_cloud_pct)),
            ("ingest.start_date", start_date.as_deref().map(quoted)),
            ("ingest.end_date", end_date.as_deref().map(quoted)),
        ],
        Command::Tile { roi, tile_size } => vec![
            ("paths.roi", roi.as_deref().map(path_str)),
            ("tiling.tile_size", int(*tile_size)),
        ],
        Command::Train {
            lr,
            epochs,
            batch_size,
            patience,
        } => vec![
            ("train.lr", num(*lr)),
            ("train.max_epochs", int(*epochs)),
            ("train.batch_size", int(*batch_size)),
            ("train.patience", int(*patience)),
        ],
        Command::Infer {
            tau,
            filter_passes,
            scene,
        } => vec![
            ("inference.tau", num(*tau)),
            ("inference.filter_passes", int(*filter_passes)),
            ("inference.scene", scene.as_deref().map(quoted)),
        ],
        Command::Bench {
            device_name,
            warmup_epochs,
            measured_epochs,
        } => vec![
            ("bench.device_name", device_name.as_deref().map(quoted)),
            ("bench.warmup_epochs", int(*warmup_epochs)),
            ("bench.measured_epochs", int(*measured_epochs)),
        ],
        Command::Report { baseline, basis } => vec![
            ("bench.baseline", baseline.as_deref().map(quoted)),
            ("bench.basis", basis.as_deref().map(quoted)),
        ],
        _ => Vec::new(),
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &cli.global.set {
        let Some((k, v)) = s.split_once('=') else {
            bail!(Error::Config(vec![format!("--set expects KEY=VALUE, got `{s}`")]));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let g = &cli.global;
    let globals = [
        ("paths.work_dir", g.work_dir.as_deref().map(path_str)),
        ("threads", g.threads.map(|t| t.to_string())),
        (
            "timing.clock",
            g.clock.map(|c| {
                quoted(match c {
                    ClockArg::Monotonic => "monotonic",
                    ClockArg::Tick => "tick",
                })
            }),
        ),
    ];
    for (k, v) in globals.into_iter().chain(stage_overrides(&cli.command)) {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    Ok(out)
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, Vec<String>)> {
    let o = overrides(cli)?;
    let loaded = match &cli.global.config {
        Some(p) => config::validate_config(p, &o),
        None => config::config_from_overrides(&o),
    };
    // a config that does not parse is a configuration error, not a data error
    loaded.map_err(|e| match e {
        Error::Parse { .. } => Error::Config(vec![e.to_string()]).into(),
        e => e.into(),
    })
}

fn stage_range(cfg: &PipelineConfig, from: Option<&str>, to: &str) -> Result<Vec<Stage>> {
    let first = match from {
        Some(s) => s.parse()?,
        None if cfg.paths.catalog.is_some() => Stage::Ingest,
        None => Stage::Synth,
    };
    let last: Stage = to.parse()?;
    if first > last {
        bail!(Error::InvalidArgument(format!("--from {first} comes after --to {last}")));
    }
    Ok(Stage::ALL.into_iter().filter(|s| (first..=last).contains(s)).collect())
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, warnings) = load_config(&cli)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if let Command::Validate = cli.command {
        println!("# config is valid; resolved values with defaults:");
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let seed = config::resolve_seed(cli.global.seed, cfg.seed, env_seed.as_deref())?;
    lulc_core::par::init_global_threads(cfg.threads);

    let stages = match &cli.command {
        Command::Synth { .. } => vec![Stage::Synth],
        Command::Ingest { .. } => vec![Stage::Ingest],
        Command::Tile { .. } => vec![Stage::Tile],
        Command::Stats => vec![Stage::Stats],
        Command::Split => vec![Stage::Split],
        Command::Train { .. } => vec![Stage::Train],
        Command::Eval => vec![Stage::Eval],
        Command::Infer { .. } => vec![Stage::Infer],
        Command::Bench { .. } => vec![Stage::Bench],
        Command::Report { .. } => vec![Stage::Report],
        Command::Map => vec![Stage::Map],
        Command::Run { from, to } => stage_range(&cfg, from.as_deref(), to)?,
        Command::Validate => unreachable!("handled above"),
    };
    let quiet = cli.global.quiet;
    let mut pipeline = Pipeline::new(cfg, seed);
    if !quiet {
        pipeline = pipeline.with_progress(|m| eprintln!("  {m}"));
    }
    for stage in stages {
        let summary = pipeline.run(stage).with_context(|| format!("stage `{stage}` failed"))?;
        println!("{stage}: {}", summary.message);
    }
    Ok(())
}

/// Exit code for an error, from the innermost library error in the chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::MissingArtifact { .. } | Error::StaleArtifact { .. } => 3,
        Error::Io { .. } => 4,
        Error::Parse { .. }
        | Error::Checkpoint { .. }
        | Error::DuplicateCell { .. }
        | Error::Shape(_)
        | Error::Index(_)
        | Error::Empty(_) => 5,
        Error::NonFiniteLoss { .. } | Error::DegenerateVariance(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
