//! Training loop.

pub mod loader;
pub mod schedule;
pub mod sgd;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lc3net_tensor::{Graph, Mode, Tensor};

use crate::checkpoint::save_model;
use crate::config::TrainConfig;
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::feature::Level;
use crate::losses::{total_loss_with_logit_grads, LossBreakdown, LossWeights};
use crate::model::{Lc3Net, ModelConfig};

pub use loader::{worker_count, Batch, BatchPlan, Loader, Source, WORKERS_ENV};
pub use schedule::{lr_at, warmup_steps};
pub use sgd::Sgd;

pub const LOG_HEADER: &str = "step,lr,loss_total,loss_dom,loss_aux3,loss_aux4,loss_aux5";
pub const LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss.total,
            self.loss.dominant,
            self.loss.aux(Level::L3),
            self.loss.aux(Level::L4),
            self.loss.aux(Level::L5)
        )
    }
}

/// Forward, loss, backward and parameter update for one batch.
pub fn train_step(
    model: &mut Lc3Net,
    opt: &mut Sgd,
    images: &Tensor,
    masks: &Tensor,
    lr: f64,
    weights: &LossWeights,
    clip: Option<f64>,
) -> Result<LossBreakdown> {
    let graph = Graph::new(Mode::Train);
    let preds = model.forward(&graph, images)?;
    let dominant: Vec<&Tensor> = preds.dominant.iter().map(|v| v.value()).collect();
    let auxiliary: BTreeMap<Level, &Tensor> = preds.auxiliary.iter().map(|(l, v)| (*l, v.value())).collect();
    let (loss, dom_grads, aux_grads) = total_loss_with_logit_grads(&dominant, &auxiliary, masks, weights)?;
    if !loss.total.is_finite() {
        return Ok(loss);
    }
    let mut seeds = Vec::with_capacity(preds.len());
    for (v, g) in preds.dominant.iter().zip(dom_grads) {
        seeds.push((v, g));
    }
    for (level, g) in aux_grads {
        seeds.push((&preds.auxiliary[&level], g));
    }
    let grads = graph.backward(&seeds)?;
    for update in graph.take_norm_updates() {
        update.apply(model.store_mut());
    }
    opt.step(model.store_mut(), grads.params(), lr, clip);
    Ok(loss)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Lc3Net,
    pub log: Vec<LogRow>,
    pub seed: u64,
    pub final_checkpoint: Option<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let mut log = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn row(&mut self, row: &LogRow) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        writeln!(self.log, "{}", row.to_csv())
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Trains a fresh model on `source`; with `out_dir`, writes the loss log and checkpoints there.
pub fn train(
    cfg: &TrainConfig,
    source: Source,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let seed = cfg.seed.unwrap_or_else(rand::random);
    let mut saved_cfg = cfg.clone();
    saved_cfg.seed = Some(seed);
    let mut model = Lc3Net::new(ModelConfig {
        seed,
        ..cfg.model.clone()
    })?;
    let plan = BatchPlan {
        seed,
        batch_size: cfg.batch_size,
        augment: cfg.data.clone(),
        len: source.len(),
    };
    let per_epoch = plan.batches_per_epoch();
    let total = per_epoch * cfg.epochs;
    let mut outputs = out_dir.map(Outputs::create).transpose()?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(total);
    let mut final_checkpoint = None;
    let loader = Loader::new(plan, source, cfg.epochs, worker_count()?);
    for (step, batch) in loader.enumerate() {
        let batch = batch?;
        let lr = lr_at(step, total, cfg.max_lr, cfg.warmup_fraction)?;
        let loss = train_step(&mut model, &mut opt, &batch.images, &batch.masks, lr, &cfg.loss, cfg.grad_clip)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: loss.total,
            });
        }
        let row = LogRow { step, lr, loss };
        if let Some(out) = outputs.as_mut() {
            out.row(&row)?;
        }
        progress(&row);
        log.push(row);
        let epoch_done = (step + 1) % per_epoch == 0;
        if let (Some(out), true) = (outputs.as_ref(), epoch_done) {
            let epoch = (step + 1) / per_epoch;
            if epoch == cfg.epochs {
                let path = out.dir.join(FINAL_CHECKPOINT);
                save_model(&model, &saved_cfg, &path)?;
                final_checkpoint = Some(path);
            } else if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_model(&model, &saved_cfg, &out.dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        seed,
        final_checkpoint,
    })
}

/// Trains on a `<root>/images`, `<root>/masks` dataset.
pub fn train_dir(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let index = DatasetIndex::open(data_root)?;
    index.load(0)?;
    train(cfg, Source::Files(index), Some(out_dir), progress)
}
