use std::path::PathBuf;
use std::process::ExitCode;

use bgdensity::ensemble::FusionMode;
use bgdensity::{Error, Result};
use bgdensity_pipeline::commands::format_table;
use bgdensity_pipeline::config::parse_layers;
use bgdensity_pipeline::{synthetic_config, EstimatorChoice, Overrides, PipelineConfig};
use clap::{Parser, Subcommand};

/// Foreground segmentation from background feature densities.
#[derive(Debug, Parser)]
#[command(name = "bgdensity", version)]
struct Cli {
    /// JSON pipeline configuration; flags below take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated layer ids, e.g. 3,4,5,6.
    #[arg(long, global = true)]
    layers: Option<String>,
    /// flow, knn or both.
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// min, max or logistic.
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// Output directory (for gen-synthetic: the corpus directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign splits and build per-layer background datasets.
    Prepare,
    /// Train the density estimators and calibrate them.
    Train,
    /// Fit the layer fusion on the fitting split.
    FitFusion,
    /// Write likelihood maps and masks.
    Segment {
        /// Comma-separated image ids; defaults to the test split.
        #[arg(long)]
        images: Option<String>,
    },
    /// Score segmentations against ground truth.
    Evaluate,
    /// Time scoring and report artifact sizes.
    Bench,
    /// Write a synthetic corpus and a matching config.json.
    GenSynthetic,
}

fn overrides(cli: &Cli) -> Result<Overrides> {
    Ok(Overrides {
        seed: cli.seed,
        layers: cli.layers.as_deref().map(parse_layers).transpose()?,
        estimator: cli.estimator.as_deref().map(str::parse::<EstimatorChoice>).transpose()?,
        fusion: cli.fusion.as_deref().map(str::parse::<FusionMode>).transpose()?,
        out_dir: cli.out.clone(),
    })
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None if matches!(cli.command, Command::GenSynthetic) => synthetic_config(),
        None => PipelineConfig::default(),
    };
    cfg.apply(&overrides(cli)?);
    cfg.validate()?;
    match &cli.command {
        Command::Prepare => {
            for c in bgdensity_pipeline::prepare(&cfg)? {
                println!(
                    "layer {} {}: {} background cells kept, {} mixed and {} foreground discarded",
                    c.layer, c.split, c.background, c.mixed, c.foreground
                );
            }
        }
        Command::Train => {
            for s in bgdensity_pipeline::train(&cfg)? {
                let c = s.calibration;
                println!(
                    "{} layer {}: epochs={} best={} train_mean={:.4} val_mean={:.4} val_std={:.4}",
                    s.estimator, s.layer, s.epochs, s.best_epoch, c.train_mean_nll, c.val_mean, c.val_std
                );
            }
        }
        Command::FitFusion => {
            for r in bgdensity_pipeline::fit_fusion(&cfg)? {
                print!("{}", r.to_text());
            }
        }
        Command::Segment { images } => {
            let ids: Option<Vec<String>> =
                images.as_ref().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
            let done = bgdensity_pipeline::segment(&cfg, ids.as_deref())?;
            println!("segmented {} images into {}", done.len(), cfg.out_dir.display());
        }
        Command::Evaluate => {
            let rows = bgdensity_pipeline::evaluate(&cfg)?;
            print!("{}", format_table(&rows, &cfg.layers));
        }
        Command::Bench => {
            for r in bgdensity_pipeline::bench(&cfg)? {
                println!("{}", r.to_line());
            }
        }
        Command::GenSynthetic => {
            let dir = cfg.out_dir.clone();
            bgdensity_pipeline::gen_synthetic(&cfg, &dir)?;
            println!("wrote {} images and {}", cfg.synthetic.n_images, dir.join("config.json").display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
