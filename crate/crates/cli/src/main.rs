use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use wsroi::config::{RunConfig, SNAPSHOT_NAME};
use wsroi::extractor::{parse_taps, Tap};
use wsroi::pipeline;

/// Weakly-supervised region extraction: Grad-CAM pseudo labels from an image
/// classifier, then a UNet trained on them with a pixel contrastive term.
#[derive(Debug, Parser)]
#[command(name = "wsroi", version)]
struct Cli {
    /// TOML run configuration. Defaults to `<out>/resolved_config.toml` when
    /// that exists, so stages chain without repeating flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (for `synth`: the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root containing `train/` and optionally `test/`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Root seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Side length images are resized to (multiple of 32).
    #[arg(long, global = true)]
    image_size: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the scene classifier.
    TrainClassifier(ClassifierArgs),
    /// Turn multiscale Grad-CAM maps into pseudo labels.
    GenPseudo(PseudoArgs),
    /// Train the UNet extractor on the pseudo labels.
    TrainExtractor(ExtractorArgs),
    /// Score the test split and write the metric report.
    Evaluate,
    /// Render ROC and PR curves from the metric report.
    Plot,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    size: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ClassifierArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Five comma-separated block widths.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Five comma-separated conv counts per block.
    #[arg(long, value_delimiter = ',')]
    convs: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write per-layer and merged heatmaps under `plots/cam/`.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Train with cross-entropy only.
    NoContrast,
}

#[derive(Debug, Args)]
struct ExtractorArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Contrastive taps, e.g. `up1,up2` (the default) or `up2,up3`.
    #[arg(long)]
    taps: Option<String>,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    /// Five comma-separated encoder widths.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

fn array5(v: &[usize], what: &str) -> anyhow::Result<[usize; 5]> {
    v.try_into()
        .map_err(|_| anyhow::anyhow!("--{what} takes exactly five values"))
}

fn base_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let from_file = |p: &Path| RunConfig::load(p).with_context(|| format!("reading {}", p.display()));
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(p), _) => from_file(p)?,
        (None, Some(out)) if out.join(SNAPSHOT_NAME).is_file() => from_file(&out.join(SNAPSHOT_NAME))?,
        _ => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data.root = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.image_size {
        cfg.data.image_size = s;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            let Some(out) = cli.out.clone() else {
                bail!("synth needs --out <dataset dir>");
            };
            if let Some(n) = a.n {
                cfg.synth.n = n as usize;
            }
            if let Some(s) = a.size {
                cfg.synth.size = s as usize;
            }
            let summary = pipeline::synth_stage(
                &out,
                cfg.seed,
                cfg.synth.n,
                cfg.synth.size,
                &cfg.synth.params,
                cfg.data.train_fraction,
                a.force,
            )?;
            print_json(&summary)?;
        }
        Command::TrainClassifier(a) => {
            let t = &mut cfg.classifier_train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.lr = a.lr.unwrap_or(t.lr);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            if let Some(w) = &a.widths {
                cfg.classifier.widths = array5(w, "widths")?;
            }
            if let Some(c) = &a.convs {
                cfg.classifier.convs_per_block = array5(c, "convs")?;
            }
            let cfg = cfg.resolve()?;
            let summary = pipeline::train_classifier_stage(&cfg)?;
            info!("classifier train accuracy {}", summary.history.final_train_accuracy);
            print_json(&summary)?;
        }
        Command::GenPseudo(a) => {
            cfg.cam.threshold = a.threshold.unwrap_or(cfg.cam.threshold);
            cfg.cam.heatmaps |= a.heatmaps;
            let cfg = cfg.resolve()?;
            print_json(&pipeline::gen_pseudo_stage(&cfg)?)?;
        }
        Command::TrainExtractor(a) => {
            let t = &mut cfg.extractor_train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.lr0 = a.lr.unwrap_or(t.lr0);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.tau = a.tau.unwrap_or(t.tau);
            if let Some(s) = &a.taps {
                t.taps = parse_taps(s)?;
            }
            if a.ablate == Some(Ablation::NoContrast) {
                t.contrastive_enabled = false;
            }
            if let Some(w) = &a.widths {
                cfg.extractor.widths = array5(w, "widths")?;
            }
            let cfg = cfg.resolve()?;
            let log = pipeline::train_extractor_stage(&cfg)?;
            if let Some(last) = log.last() {
                info!("extractor final epoch total loss {}", last.total);
            }
            let taps: Vec<String> = cfg.extractor_train.taps.iter().map(Tap::to_string).collect();
            print_json(&serde_json::json!({
                "epochs": log.len(),
                "contrastive": cfg.extractor_train.contrastive_enabled,
                "taps": taps,
                "final": log.last(),
            }))?;
        }
        Command::Evaluate => {
            let cfg = cfg.resolve()?;
            let outcome = pipeline::evaluate_stage(&cfg)?;
            let scalars: serde_json::Map<String, serde_json::Value> = outcome
                .report
                .scalars()
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
                .collect();
            print_json(&serde_json::json!({ "metrics": scalars, "masks": outcome.quality }))?;
        }
        Command::Plot => {
            let cfg = cfg.resolve()?;
            for p in pipeline::plot_stage(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
