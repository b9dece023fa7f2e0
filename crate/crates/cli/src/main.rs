use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use uninfo::experiment::{self, ExperimentConfig, Preset, SweepParam};
use uninfo::par;
use uninfo::plot::{self, PlotKind};
use uninfo::Error;

/// Test-time adaptation experiments on corrupted image streams.
#[derive(Parser, Debug)]
#[command(name = "uninfo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss preset.
    #[arg(long, value_parser = ["full", "ent_only", "ent_pl", "ent_unif_pl", "no_balancing"])]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write corrupted stream archives (cached by content hash).
    Corrupt(Common),
    /// Adapt on every (kind, seed) stream.
    Run(Common),
    /// Repeat the run over values of lambda or i0.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["lambda", "i0"])]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
    },
    /// Render an SVG from metrics, spherical-PCA or sweep CSVs.
    Plot {
        #[arg(long, value_parser = ["weights", "spca", "sweep"])]
        what: String,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// No-adapt evaluation of clean and corrupted data.
    Eval(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = &c.preset {
        cfg.preset = p.parse::<Preset>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corrupt(c) => {
            let cfg = load_config(&c)?;
            for s in experiment::cmd_corrupt(&cfg)? {
                println!("{}\t{}", s.dir.display(), if s.cached { "cached" } else { "written" });
            }
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let results = experiment::cmd_run(&cfg)?;
            println!("kind\tseed\tno_adapt\tonline\tpost_hoc");
            let show = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            for r in &results {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    r.kind,
                    r.seed,
                    show(r.no_adapt_accuracy),
                    show(r.online_accuracy),
                    show(r.post_hoc_accuracy)
                );
            }
        }
        Command::Sweep { common, param, values } => {
            let cfg = load_config(&common)?;
            let param: SweepParam = param.parse()?;
            println!("{}\tmean\tstd", param.name());
            for r in experiment::cmd_sweep(&cfg, param, &values)? {
                println!("{}\t{:.4}\t{:.4}", r.value, r.mean, r.std);
            }
        }
        Command::Plot { what, out, inputs } => {
            let kind: PlotKind = what.parse()?;
            let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            plot::plot_files(kind, &refs, &out).with_context(|| format!("plotting {what}"))?;
            info!("wrote {}", out.display());
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            println!("set\taccuracy\tentropy\tuniformity\tmi\temd");
            for r in experiment::cmd_eval(&cfg)? {
                println!(
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    r.set,
                    r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                    r.mean_entropy,
                    r.uniformity_metric,
                    r.mutual_information,
                    r.emd_modality_gap
                );
            }
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for unreadable or malformed data, 4 for numeric
/// failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::EmptyKinds | Error::RankTooLarge { .. } | Error::TooManyClasses { .. }) => 2,
        Some(Error::InvalidArgument(_) | Error::UnknownKind(_)) => 2,
        Some(Error::NumericFailure(_)) => 4,
        Some(_) => 3,
        None => 3,
    }
}

/// Error chain joined by `: `, dropping causes already quoted by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = par::env_threads();
    match par::with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
