use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use image::GrayImage;
use lc3net::checkpoint::load_model;
use lc3net::config::TrainConfig;
use lc3net::data::{load_image, resize_image, synthetic_disks, write_dataset};
use lc3net::metrics::{evaluate_dataset, write_curves_csv};
use lc3net::tensor::{Graph, Tensor};
use lc3net::train::train_dir;

#[derive(Parser)]
#[command(name = "lc3net", version, about = "Salient object detection: train, predict, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an images/ + masks/ dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write 8-bit saliency maps for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predicted maps against ground-truth masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        curves: PathBuf,
    },
    /// Generate a synthetic disk dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, data, out, seed } => train(&config, &data, &out, seed),
        Command::Predict { checkpoint, input, output } => predict(&checkpoint, &input, &output),
        Command::Evaluate { pred, gt, report, curves } => evaluate(&pred, &gt, &report, &curves),
        Command::Synth { out, count, size, seed } => {
            write_dataset(&out, &synthetic_disks(count, size, seed))?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
    }
}

fn train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let start = Instant::now();
    let outcome = train_dir(&cfg, data, out, |row| {
        if row.step % 10 == 0 {
            eprintln!(
                "step {:>6}  lr {:.5}  loss {:.5}  ({:.1}s)",
                row.step,
                row.lr,
                row.loss.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let last = outcome.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps (seed {}), final loss {last:.5}, checkpoint {}",
        outcome.log.len(),
        outcome.seed,
        outcome
            .final_checkpoint
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (model, cfg) = load_model(checkpoint)?;
    let size = cfg.data.train_size;
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no images in {}", input.display());
    }
    for path in &entries {
        let image = load_image(path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let x = resize_image(&image, size);
        let batch = Tensor::stack(&[x])?;
        let sal = model.predict(&batch)?;
        let graph = Graph::inference();
        let back = graph.resize(&graph.constant(sal), h, w)?;
        let px: Vec<u8> = back
            .value()
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).context("image without a file stem")?;
        let dest = output.join(format!("{stem}.png"));
        GrayImage::from_raw(w as u32, h as u32, px)
            .context("saliency buffer size")?
            .save(&dest)
            .with_context(|| format!("writing {}", dest.display()))?;
    }
    println!("wrote {} saliency maps to {}", entries.len(), output.display());
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, report: &Path, curves: &Path) -> Result<()> {
    let r = evaluate_dataset(pred, gt)?;
    r.write_json(report)?;
    write_curves_csv(&r, curves)?;
    println!(
        "{} images  S {:.4}  avgF {:.4}  maxF {:.4}  adpF {:.4}  E {:.4}  MAE {:.4}",
        r.num_images, r.s_measure, r.avg_f, r.max_f, r.adaptive_f, r.e_measure, r.mae
    );
    Ok(())
}
