use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densebox::config::RunConfig;
use densebox::runner::{cmd_detect, cmd_eval, cmd_synth, cmd_train, resolve_inputs, Split};
use densebox::Error;

/// Anchor-free dense detector: synthesise data, train, detect, evaluate.
///
/// Any `--section.key=value` or `--key=value` flag not listed below
/// overrides the matching config field.
#[derive(Debug, Parser)]
#[command(name = "densebox", version)]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset's train split.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect objects in PPM images or a dataset split.
    Detect {
        checkpoint: PathBuf,
        /// Image files or dataset directories.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_thresh: Option<f64>,
        #[arg(long)]
        use_refine: bool,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for images with detections drawn in.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Score a detection file against annotations.
    Eval {
        detections: PathBuf,
        /// Dataset directory or JSON object of annotations keyed by image.
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also render the precision-recall curve to this PPM.
        #[arg(long)]
        pr_curve: Option<PathBuf>,
    },
}

const KNOWN: &[&str] = &[
    "config",
    "seed",
    "out",
    "score-thresh",
    "use-refine",
    "split",
    "overlays",
    "iou",
    "pr-curve",
    "help",
    "version",
];

/// Splits `--key=value` config overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let (mut rest, mut overrides) = (Vec::new(), Vec::new());
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, _)) if !KNOWN.contains(&key) => overrides.push(a[2..].to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn run(cli: Cli, overrides: &[String]) -> densebox::Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth { out } => {
            let s = cmd_synth(&cfg, &out)?;
            println!(
                "wrote {} scenes with {} objects to {}",
                s.scenes,
                s.objects,
                out.display()
            );
        }
        Command::Train { dataset, out } => {
            let s = cmd_train(&cfg, &dataset, &out)?;
            match s.last {
                Some(last) => println!("{last}"),
                None => println!("no iterations run"),
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Detect {
            checkpoint,
            inputs,
            out,
            score_thresh,
            use_refine,
            split,
            overlays,
        } => {
            if let Some(t) = score_thresh {
                cfg.pyramid.score_threshold = t;
            }
            cfg.inference.use_refine |= use_refine;
            let images = resolve_inputs(&inputs, split.parse::<Split>()?)?;
            let dets = cmd_detect(&cfg, &checkpoint, &images, &out, overlays.as_deref())?;
            let n: usize = dets.values().map(Vec::len).sum();
            println!(
                "{n} detections in {} images -> {}",
                dets.len(),
                out.display()
            );
        }
        Command::Eval {
            detections,
            annotations,
            iou,
            out,
            split,
            pr_curve,
        } => {
            let r = cmd_eval(
                &detections,
                &annotations,
                split.parse::<Split>()?,
                iou,
                &out,
                pr_curve.as_deref(),
            )?;
            println!(
                "AP@{}: {:.4} ({} detections, {} ground-truth boxes)",
                r.iou_threshold, r.ap, r.n_det, r.n_gt
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
