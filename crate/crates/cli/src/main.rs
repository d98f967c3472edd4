use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use woundseg::dataset::{self, Split};
use woundseg::infer::{default_mask_path, infer_file, Segmenter, DEPLOY_THRESHOLD};
use woundseg::models::Mode;
use woundseg::train::{self, Checkpoint, TrainConfig};
use woundseg_serve::ServiceConfig;

#[derive(Parser)]
#[command(name = "woundseg", version, about = "Wound segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report duplicate images in a corpus.
    Dedup {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = dataset::DEFAULT_MAX_DISTANCE)]
        max_distance: u32,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Deduplicate a corpus and write a seeded train/val/test manifest.
    Split {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "0.6,0.2,0.2")]
        ratios: String,
        #[arg(long, default_value_t = dataset::DEFAULT_MAX_DISTANCE)]
        max_distance: u32,
        /// Defaults to `<root>/splits.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Overrides the corpus recorded in the checkpoint.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Overrides the manifest recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the HTTP and WebSocket service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
    /// Segment one image file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEPLOY_THRESHOLD)]
        threshold: f64,
        /// Defaults to `<image stem>.mask.png` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad ratio {p:?}")))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => bail!("expected three comma-separated ratios, got {s:?}"),
    }
}

fn dedup_corpus(root: &std::path::Path, max_distance: u32) -> Result<(Vec<dataset::ImageSample>, dataset::DedupReport)> {
    let corpus = dataset::load_corpus(root)?;
    let groups = dataset::find_duplicates(&corpus, max_distance)?;
    Ok(dataset::deduplicate(&corpus, &groups)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dedup { root, max_distance, report } => {
            let (retained, rep) = dedup_corpus(&root, max_distance)?;
            print!("{rep}");
            if let Some(path) = report {
                std::fs::write(&path, rep.to_string()).with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!("removed {} duplicates, retained {}", rep.removed_count(), retained.len());
        }
        Command::Split { root, seed, ratios, max_distance, out } => {
            let (retained, rep) = dedup_corpus(&root, max_distance)?;
            let ids: Vec<&str> = retained.iter().map(|s| s.id.as_str()).collect();
            let manifest = dataset::make_splits(&ids, parse_ratios(&ratios)?, seed)?;
            let out = out.unwrap_or_else(|| root.join("splits.csv"));
            std::fs::write(&out, manifest.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            let (a, b, c) = manifest.counts();
            eprintln!("removed {} duplicates; train {a}, val {b}, test {c} -> {}", rep.removed_count(), out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let summary = train::train(&cfg)?;
            println!(
                "best epoch {} with val IoU {:.4}; run directory {}",
                summary.best_epoch,
                summary.best_val_iou,
                summary.run_dir.display()
            );
        }
        Command::Eval { ckpt, split, root, manifest, threshold } => {
            let split: Split = split.parse()?;
            let (mut net, meta) = Checkpoint::load(&ckpt)?;
            net.set_mode(Mode::Eval);
            let root = root.unwrap_or(meta.data_root);
            let manifest_path = manifest.unwrap_or(meta.manifest);
            let text = std::fs::read_to_string(&manifest_path)
                .with_context(|| format!("reading {}", manifest_path.display()))?;
            let manifest = dataset::SplitManifest::from_csv(&text)?;
            let corpus = dataset::load_corpus(&root)?;
            let pairs = train::load_split(&corpus, &manifest, split)?;
            let refs: Vec<_> = pairs.iter().map(|p| (&p.image, &p.mask)).collect();
            let report = train::evaluate(&net, &refs, meta.resize, threshold.unwrap_or(meta.eval_threshold))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { config, port, host } => {
            let mut cfg = match config {
                Some(path) => ServiceConfig::load(&path)?,
                None => ServiceConfig::default(),
            };
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(h) = host {
                cfg.host = h;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(woundseg_serve::serve(&cfg))?;
        }
        Command::Infer { ckpt, image, threshold, out } => {
            let (net, _) = woundseg::models::Network::from_archive_file(&ckpt)?;
            let seg = Segmenter::new(net, threshold)?;
            let out = out.unwrap_or_else(|| default_mask_path(&image));
            let record = infer_file(&seg, &image, &out)?;
            println!("{}", serde_json::to_string(&record)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
