use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sketchparse_core::checkpoint::Checkpoint;
use sketchparse_core::sketch::load_stroke_file;
use sketchparse_core::train::{self, CHECKPOINT_FILE, METRICS_LOG_FILE, SWEEP_FILE};
use sketchparse_core::{synthesize_dataset, RunConfig, Split, SynthSpec};
use sketchparse_serve::AppState;

#[derive(Parser)]
#[command(
    name = "sketchparse",
    version,
    about = "Stroke-level sketch recognition with component parsing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a stroke file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every supervision/fusion configuration with one run configuration.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dump per-stroke features, assignments and memory keys.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic stroke file and its label space.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Label space path; defaults to `<out stem>.labels.json`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Keep this many samples per category in `--out` and write the rest to `--test-out`.
        #[arg(long, requires = "test_out")]
        train_per_category: Option<usize>,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn default_labels_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    out.with_file_name(format!("{stem}.labels.json"))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let run = RunConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let outcome = train::train(&run)?;
            eprintln!(
                "best epoch {} of {}; wrote {} and {}",
                outcome.best_epoch,
                outcome.log.len(),
                run.output_dir.join(CHECKPOINT_FILE).display(),
                run.output_dir.join(METRICS_LOG_FILE).display()
            );
            print_json(&outcome.best.metrics)
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let dataset = load_stroke_file(
                &data,
                &ck.label_space,
                ck.network.config.max_strokes,
                Split::Test,
            )?;
            print_json(&train::evaluate_checkpoint(&ck, &dataset)?)
        }
        Command::Sweep { config } => {
            let run = RunConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let rows = train::sweep(&run)?;
            for row in &rows {
                println!("{}", serde_json::to_string(row)?);
            }
            eprintln!("wrote {}", run.output_dir.join(SWEEP_FILE).display());
            Ok(())
        }
        Command::Export {
            checkpoint,
            data,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let dataset = load_stroke_file(
                &data,
                &ck.label_space,
                ck.network.config.max_strokes,
                Split::Test,
            )?;
            let path = train::export_features(&ck, &dataset, &out)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Synth {
            spec,
            seed,
            out,
            labels,
            train_per_category,
            test_out,
        } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let dataset = synthesize_dataset(&SynthSpec::from_toml(&text)?, seed)?;
            let labels = labels.unwrap_or_else(|| default_labels_path(&out));
            dataset.label_space.save(&labels)?;
            match (train_per_category, test_out) {
                (Some(n), Some(test_path)) => {
                    let (train, test) = dataset.split_per_category(n);
                    train.save(&out)?;
                    test.save(&test_path)?;
                    eprintln!(
                        "wrote {} train and {} test samples",
                        train.len(),
                        test.len()
                    );
                }
                (None, None) => {
                    dataset.save(&out)?;
                    eprintln!("wrote {} samples", dataset.len());
                }
                _ => bail!("--train-per-category and --test-out go together"),
            }
            eprintln!("wrote {}", labels.display());
            Ok(())
        }
        Command::Serve {
            checkpoint,
            port,
            host,
        } => {
            let state = AppState::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .context("invalid host or port")?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime
                .block_on(sketchparse_serve::serve(state, addr))
                .with_context(|| format!("serving on {addr}"))?;
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
