//! Training loop, checkpointing and micro-averaged evaluation.

pub mod config;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod scheduler;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment_pair;
use crate::dataset::{self, AnnotatedPair, Split, SplitManifest, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::models::{Mode, Network};
use crate::nn::archive::ArchiveMeta;
use crate::raster::{to_normalized_tensor, RgbF32};

pub use config::TrainConfig;
pub use loss::bce_with_logits;
pub use metrics::{compute_micro_metrics, Counts, MetricsReport};
pub use optim::{AdamW, AdamWConfig};
pub use scheduler::{BestTracker, PlateauConfig, SchedulerState};

pub const EVAL_THRESHOLD: f64 = 0.5;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Thresholds `sigmoid(logits) >= threshold` for an `(N, 1, H, W)` tensor.
/// Any non-finite logit is an inference error naming `variant`.
pub fn masks_from_logits(logits: &Tensor, threshold: f64, variant: &str) -> Result<Vec<Mask>> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected one output channel, got {c}")));
    }
    let values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Inference { variant: variant.into(), reason: format!("non-finite logit at index {i}") });
    }
    values
        .chunks_exact(h * w)
        .take(n)
        .map(|plane| Mask::from_vec(w, h, plane.iter().map(|&z| (sigmoid(z) >= threshold) as u8).collect()))
        .collect()
}

/// `(N, 1, H, W)` float targets.
pub fn mask_tensor(masks: &[&Mask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Contract("empty mask batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if m.width() != w || m.height() != h {
            return Err(Error::Contract("masks in a batch must share one size".into()));
        }
        data.extend(m.as_slice().iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?)
}

/// Resizes to `size` x `size` (bilinear image, nearest mask) and stacks the
/// pairs into normalized inputs and float targets.
pub fn prepare_batch(items: &[(&RgbF32, &Mask)], size: usize) -> Result<(Tensor, Tensor)> {
    let images: Vec<RgbF32> = items.iter().map(|(i, _)| i.resize_bilinear(size, size)).collect();
    let masks: Vec<Mask> = items.iter().map(|(_, m)| m.resize_nearest(size, size)).collect();
    let x = to_normalized_tensor(&images.iter().collect::<Vec<_>>())?;
    let y = mask_tensor(&masks.iter().collect::<Vec<_>>())?;
    Ok((x, y))
}

/// Optimizer state and network for stepwise training.
pub struct Trainer {
    net: Network,
    opt: AdamW,
}

impl Trainer {
    /// Puts `net` in train mode.
    pub fn new(mut net: Network, cfg: AdamWConfig) -> Self {
        net.set_mode(Mode::Train);
        let opt = AdamW::new(net.trainable_vars(), cfg);
        Self { net, opt }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    /// One forward/backward/update on a prepared batch; returns the loss.
    /// A non-finite loss leaves the weights and running statistics untouched.
    pub fn step(&mut self, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        let saved = self.net.snapshot_buffers()?;
        let mode = self.net.mode();
        self.net.set_mode(Mode::Train);
        let logits = self.net.forward(inputs);
        self.net.set_mode(mode);
        let loss = bce_with_logits(&logits?, targets)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            self.net.restore_buffers(&saved)?;
            return Err(Error::NonFiniteLoss { epoch: 0, step: self.opt.steps() as usize + 1, batch_ids: vec![] });
        }
        self.opt.step(&loss.backward()?)?;
        Ok(value)
    }
}

/// Predicts every item at `resize` x `resize` and accumulates micro counts
/// against the equally resized ground truth.
pub fn evaluate(net: &Network, items: &[(&RgbF32, &Mask)], resize: usize, threshold: f64) -> Result<MetricsReport> {
    if net.mode() != Mode::Eval {
        return Err(Error::Contract("evaluation requires a network in eval mode".into()));
    }
    if items.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut counts = Counts::default();
    for chunk in items.chunks(4) {
        let (x, _) = prepare_batch(chunk, resize)?;
        let preds = masks_from_logits(&net.forward(&x)?, threshold, net.variant().name())?;
        for (p, (_, m)) in preds.iter().zip(chunk) {
            counts.accumulate(p, &m.resize_nearest(resize, resize))?;
        }
    }
    Ok(counts.report())
}

/// Metadata stored with each saved checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_iou: f64,
    pub val_dsc: f64,
    pub lr: f64,
    pub data_root: PathBuf,
    pub manifest: PathBuf,
    pub resize: usize,
    pub eval_threshold: f64,
}

impl Checkpoint {
    fn meta(&self, net: &Network) -> Result<ArchiveMeta> {
        let mut meta = net.metadata();
        let value = serde_json::to_value(self).map_err(|e| Error::Consistency(e.to_string()))?;
        if let serde_json::Value::Object(map) = value {
            meta.provenance = map.into_iter().collect::<BTreeMap<_, _>>();
        }
        Ok(meta)
    }

    /// Loads a checkpoint archive in eval mode together with its metadata.
    pub fn load(path: &Path) -> Result<(Network, Checkpoint)> {
        let (net, meta) = Network::from_archive_file(path)?;
        let map: serde_json::Map<String, serde_json::Value> = meta.provenance.into_iter().collect();
        let ckpt = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
        Ok((net, ckpt))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub records: Vec<EpochRecord>,
}

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const LOG_FILE: &str = "log.ndjson";
pub const BEST_CHECKPOINT: &str = "ckpt_best";
pub const LAST_CHECKPOINT: &str = "ckpt_last";
pub const SPLITS_FILE: &str = "splits.csv";

/// Reads the manifest named by the config, or deduplicates the corpus,
/// derives one from the seed and stores it in the run directory.
fn resolve_manifest(cfg: &TrainConfig, corpus: &[dataset::ImageSample]) -> Result<(SplitManifest, PathBuf)> {
    match &cfg.data.manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok((SplitManifest::from_csv(&text)?, path.clone()))
        }
        None => {
            let groups = dataset::find_duplicates(corpus, dataset::DEFAULT_MAX_DISTANCE)?;
            let (retained, report) = dataset::deduplicate(corpus, &groups)?;
            if report.removed_count() > 0 {
                log::info!("excluded {} duplicates before splitting", report.removed_count());
            }
            let ids: Vec<&str> = retained.iter().map(|s| s.id.as_str()).collect();
            let m = dataset::make_splits(&ids, DEFAULT_RATIOS, cfg.seed)?;
            let path = cfg.run_dir.join(SPLITS_FILE);
            std::fs::write(&path, m.to_csv()).map_err(|e| Error::io(&path, e))?;
            Ok((m, path))
        }
    }
}

/// Loads the annotated pairs assigned to `split`.
pub fn load_split(corpus: &[dataset::ImageSample], manifest: &SplitManifest, split: Split) -> Result<Vec<AnnotatedPair>> {
    let by_id: BTreeMap<&str, &dataset::ImageSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    manifest
        .ids(split)
        .into_iter()
        .map(|id| {
            let s = by_id
                .get(id)
                .ok_or_else(|| Error::Consistency(format!("manifest id {id:?} is not in the corpus")))?;
            dataset::load_pair(s)
        })
        .collect()
}

fn pair_refs(pairs: &[AnnotatedPair]) -> Vec<(&RgbF32, &Mask)> {
    pairs.iter().map(|p| (&p.image, &p.mask)).collect()
}

/// Trains per `cfg` and fills its run directory with the config snapshot,
/// one log record per epoch and the best and last checkpoints.
pub fn train(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let run = &cfg.run_dir;
    std::fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
    let snap = run.join(CONFIG_SNAPSHOT);
    std::fs::write(&snap, cfg.to_toml()?).map_err(|e| Error::io(&snap, e))?;

    let corpus = dataset::load_corpus(&cfg.data.root)?;
    let (manifest, manifest_path) = resolve_manifest(cfg, &corpus)?;
    let train_set = load_split(&corpus, &manifest, Split::Train)?;
    let val_set = load_split(&corpus, &manifest, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptySplit);
    }
    log::info!("training {} on {} samples, validating on {}", cfg.model.variant, train_set.len(), val_set.len());

    let mut net = Network::build(cfg.model.variant, cfg.seed, DType::F32)?;
    if let Some(path) = &cfg.model.init_weights {
        let archive = crate::nn::archive::read_file(path)?;
        net.load_weights(&archive)?;
    }
    let mut trainer = Trainer::new(net, cfg.optimizer.adamw());
    let mut sched = SchedulerState::new(cfg.optimizer.lr);
    let mut best = BestTracker::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let log_path = run.join(LOG_FILE);
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let val_refs = pair_refs(&val_set);
    let (resize, thr) = (cfg.data.resize, cfg.data.eval_threshold);

    let validate = |trainer: &mut Trainer| -> Result<MetricsReport> {
        trainer.network_mut().set_mode(Mode::Eval);
        let r = evaluate(trainer.network(), &val_refs, resize, thr);
        trainer.network_mut().set_mode(Mode::Train);
        r
    };
    let checkpoint = |epoch: usize, report: &MetricsReport, lr: f64| Checkpoint {
        epoch,
        val_iou: report.iou,
        val_dsc: report.dsc,
        lr,
        data_root: cfg.data.root.clone(),
        manifest: manifest_path.clone(),
        resize,
        eval_threshold: thr,
    };

    let mut records = Vec::new();
    if cfg.optimizer.epochs == 0 {
        let report = validate(&mut trainer)?;
        let ck = checkpoint(0, &report, trainer.lr());
        let meta = ck.meta(trainer.network())?;
        for name in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
            trainer.network().save_weights_file(&run.join(name), &meta)?;
        }
        best.observe(0, report.iou);
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        let lr = trainer.lr();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.data.batch_size) {
            let mut augmented = Vec::with_capacity(idx.len());
            for &i in idx {
                augmented.push(augment_pair(&train_set[i].image, &train_set[i].mask, &cfg.augment, &mut rng)?);
            }
            let refs: Vec<(&RgbF32, &Mask)> = augmented.iter().map(|(i, m)| (i, m)).collect();
            let (x, y) = prepare_batch(&refs, resize)?;
            step += 1;
            let loss = trainer.step(&x, &y).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                    epoch,
                    step,
                    batch_ids: idx.iter().map(|&i| train_set[i].sample.id.clone()).collect(),
                },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let report = validate(&mut trainer)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_iou: report.iou,
            val_dsc: report.dsc,
            lr,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Consistency(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log::info!("{line}");

        let meta = checkpoint(epoch, &report, lr).meta(trainer.network())?;
        if best.observe(epoch, report.iou) {
            trainer.network().save_weights_file(&run.join(BEST_CHECKPOINT), &meta)?;
        }
        trainer.network().save_weights_file(&run.join(LAST_CHECKPOINT), &meta)?;
        trainer.set_lr(sched.step(report.dsc, &cfg.scheduler));
        records.push(record);
    }
    let (best_epoch, best_val_iou) = best.best.unwrap_or((0, 0.0));
    Ok(RunSummary { run_dir: run.clone(), best_epoch, best_val_iou, records })
}
