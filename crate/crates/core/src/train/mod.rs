//! Training: SGD with Nesterov momentum, warmup + cosine schedule, the
//! scratch and transfer regimes, per-epoch validation and checkpointing.

mod checkpoint;
mod gate;
mod init;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gate::{check_probe, ensure_gradient_gate, gate_options, gradient_gate, GATE_SEEDS, GATE_TOLERANCE};
pub use init::{init_params, remap, scratch_params, InitContext, InitRegime, InitRegistry, InitReport, ScratchInit, TransferInit};

use crate::anchors::{assign_batch, default_anchors, AnchorSet, DEFAULT_RATIO_THRESHOLD};
use crate::augment::{augment_index, AugProfile, Sample, SamplePool};
use crate::error::{config_err, Error, Result};
use crate::evaluate::{evaluate, EvalReport, GroundTruth, EVAL_IOU};
use crate::image::GrayImage;
use crate::loss::{loss_and_gradient, LossBreakdown, LossConfig};
use crate::model_graph::CompiledModel;
use crate::nn::{Mode, ParamStore};
use crate::postprocess::{decode_predictions, nms, Detection, DEFAULT_NMS_IOU, EVAL_CONF_THRESHOLD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Scratch,
    Transfer,
}

impl TrainMode {
    pub fn regime(self) -> &'static str {
        match self {
            TrainMode::Scratch => "scratch",
            TrainMode::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr0: 0.01, momentum: 0.937, weight_decay: 5e-4, nesterov: true, grad_clip: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Total epochs; in transfer mode this includes the frozen phase.
    pub epochs: usize,
    /// Leading epochs with the backbone held fixed (transfer mode only).
    pub freeze_epochs: usize,
    /// Parameters whose names start with this prefix form the backbone.
    pub freeze_prefix: String,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub warmup_epochs: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub final_lr_ratio: f64,
    pub seed: u64,
    /// Exponential moving average of the weights, used for validation.
    pub ema: bool,
    pub loss: LossConfig,
    pub val_conf: f64,
    pub val_nms_iou: f64,
    pub val_iou: f64,
    /// Source checkpoint for transfer initialization.
    pub weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Scratch,
            epochs: 100,
            freeze_epochs: 30,
            freeze_prefix: "backbone.".into(),
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            warmup_epochs: 3.0,
            final_lr_ratio: 0.01,
            seed: 0,
            ema: false,
            loss: LossConfig::default(),
            val_conf: EVAL_CONF_THRESHOLD,
            val_nms_iou: DEFAULT_NMS_IOU,
            val_iou: EVAL_IOU,
            weights: None,
        }
    }
}

impl TrainConfig {
    /// 30 frozen-backbone epochs followed by 10 of fine-tuning.
    pub fn transfer(weights: PathBuf) -> Self {
        Self { mode: TrainMode::Transfer, epochs: 40, freeze_epochs: 30, weights: Some(weights), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.lr0 > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0) {
            return Err(config_err("optimizer needs lr0 > 0, momentum in [0, 1) and non-negative decay and clip"));
        }
        if !(self.warmup_epochs >= 0.0) || !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(config_err("warmup_epochs must be non-negative and final_lr_ratio in (0, 1]"));
        }
        if self.mode == TrainMode::Transfer {
            if self.weights.is_none() {
                return Err(config_err("transfer mode needs a weights checkpoint"));
            }
            if self.freeze_epochs > self.epochs {
                return Err(config_err(format!("freeze_epochs {} exceeds epochs {}", self.freeze_epochs, self.epochs)));
            }
        }
        self.loss.validate()
    }

    pub fn frozen_at(&self, epoch: usize) -> bool {
        self.mode == TrainMode::Transfer && epoch < self.freeze_epochs
    }
}

/// Learning rate at `step` of `steps_per_epoch` within `epoch`: linear from
/// `lr0 / 10` to `lr0` over the warmup, then cosine down to
/// `lr0 * final_lr_ratio` at the end of the last epoch. The warmup is capped
/// at `epochs - 1` so short runs still reach the final rate.
pub fn lr_at(epoch: usize, step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let lr0 = cfg.optimizer.lr0;
    let t = epoch as f64 + step as f64 / steps_per_epoch.max(1) as f64;
    let total = cfg.epochs as f64;
    let warm = cfg.warmup_epochs.min(total - 1.0).max(0.0);
    if t < warm {
        return lr0 / 10.0 + (lr0 - lr0 / 10.0) * t / warm;
    }
    let p = if total > warm { ((t - warm) / (total - warm)).clamp(0.0, 1.0) } else { 1.0 };
    let f = cfg.final_lr_ratio;
    lr0 * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_map50: f64,
    pub best: bool,
}

/// Append-only JSON-lines log, one record per epoch.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub path: Option<PathBuf>,
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn new(path: Option<PathBuf>) -> Self {
        Self { path, records: Vec::new() }
    }

    pub fn append(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<EpochRecord>> {
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

pub fn anchors_for(model: &CompiledModel) -> Result<AnchorSet> {
    let levels: Vec<_> = model.graph.heads.iter().map(|h| h.0).collect();
    let a = default_anchors(&levels)?;
    a.validate(model.graph.config.anchors_per_level)?;
    Ok(a)
}

fn batch_tensor(images: &[&GrayImage], size: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width == size && img.height == size {
            data.extend_from_slice(&img.data);
        } else {
            data.extend_from_slice(&img.resize(size, size).data);
        }
    }
    Tensor::from_vec(&[images.len(), 1, size, size], data)
}

/// Eval-mode detections for each image, after NMS.
pub fn predict(
    model: &CompiledModel,
    store: &ParamStore<f32>,
    anchors: &AnchorSet,
    images: &[&GrayImage],
    conf: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let s = model.input_size();
    let (_, grids) = model.forward(store, batch_tensor(images, s), Mode::Eval)?;
    let dets = decode_predictions(&grids, anchors, conf)?;
    Ok(dets
        .into_iter()
        .zip(images)
        .map(|(d, img)| {
            // back to the source image's pixel frame
            let (sx, sy) = (img.width as f64 / s as f64, img.height as f64 / s as f64);
            let d: Vec<Detection> = d
                .into_iter()
                .map(|d| Detection { x1: d.x1 * sx, y1: d.y1 * sy, x2: d.x2 * sx, y2: d.y2 * sy, ..d })
                .collect();
            nms(&d, nms_iou)
        })
        .collect())
}

pub fn ground_truths(s: &Sample) -> Vec<GroundTruth> {
    let (w, h) = (s.image.width as f64, s.image.height as f64);
    s.boxes.iter().map(|b| GroundTruth { bbox: b.to_pixels(w, h), class_id: b.class_id }).collect()
}

/// Detects on every sample of `pool` in batches and scores the result.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pool(
    model: &CompiledModel,
    store: &ParamStore<f32>,
    anchors: &AnchorSet,
    pool: &dyn SamplePool,
    class_names: &[String],
    batch: usize,
    conf: f64,
    nms_iou: f64,
    iou: f64,
) -> Result<EvalReport> {
    let mut dets = Vec::with_capacity(pool.len());
    let mut gts = Vec::with_capacity(pool.len());
    let idx: Vec<usize> = (0..pool.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let samples = chunk.iter().map(|&i| pool.sample(i)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
        dets.extend(predict(model, store, anchors, &images, conf, nms_iou)?);
        gts.extend(samples.iter().map(ground_truths));
    }
    evaluate(&dets, &gts, class_names, iou)
}

const ORDER_SALT: u64 = 0x6f72_6465_7273_6565;
const AUG_SALT: u64 = 0x6175_676d_656e_7473;

/// Owns the parameters and optimizer state of one run.
pub struct Trainer<'m> {
    pub model: &'m CompiledModel,
    pub cfg: TrainConfig,
    pub aug: AugProfile,
    pub anchors: AnchorSet,
    pub store: ParamStore<f32>,
    pub momentum: Vec<Vec<f32>>,
    pub ema: Option<ParamStore<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_map: f64,
    /// Recorded in checkpoints for downstream tools.
    pub class_names: Vec<String>,
    backbone: Vec<bool>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m CompiledModel, cfg: TrainConfig, aug: AugProfile, store: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        let backbone = model.program.params.iter().map(|p| p.name.starts_with(&cfg.freeze_prefix)).collect();
        Ok(Self {
            anchors: anchors_for(model)?,
            momentum: store.params.iter().map(|p| vec![0.0; p.len()]).collect(),
            ema: cfg.ema.then(|| store.clone()),
            model,
            cfg,
            aug,
            store,
            epoch: 0,
            global_step: 0,
            best_map: 0.0,
            class_names: Vec::new(),
            backbone,
        })
    }

    pub fn resume(model: &'m CompiledModel, ck: Checkpoint, aug: AugProfile) -> Result<Self> {
        if ck.graph.config_hash() != model.graph.config_hash() {
            return Err(Error::GraphMismatch("checkpoint graph differs from the model being trained".into()));
        }
        let mut t = Trainer::new(model, ck.config.clone(), aug, ck.store)?;
        if !ck.momentum.is_empty() {
            t.momentum = ck.momentum;
        }
        if t.cfg.ema && !ck.ema.is_empty() {
            t.ema = Some(ParamStore { params: ck.ema, buffers: t.store.buffers.clone() });
        }
        t.epoch = ck.epoch;
        t.global_step = ck.global_step;
        t.best_map = ck.best_map;
        t.class_names = ck.class_names;
        Ok(t)
    }

    /// Parameters used for validation and export.
    pub fn eval_store(&self) -> &ParamStore<f32> {
        self.ema.as_ref().unwrap_or(&self.store)
    }

    pub fn checkpoint(&self, is_best: bool) -> Checkpoint {
        Checkpoint {
            graph: self.model.graph.clone(),
            store: self.store.clone(),
            momentum: self.momentum.clone(),
            ema: self.ema.as_ref().map(|e| e.params.clone()).unwrap_or_default(),
            config: self.cfg.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            best_map: self.best_map,
            is_best,
        }
    }

    /// Visit order of the training pool for `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ORDER_SALT);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Augmented samples for one batch; each draws from its own stream keyed
    /// by epoch and position so resumed runs see the same data.
    pub fn batch_samples(&self, pool: &dyn SamplePool, indices: &[usize], epoch: usize, first_pos: usize) -> Result<Vec<Sample>> {
        indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ AUG_SALT);
                rng.set_stream(((epoch as u64) << 32) | (first_pos + k) as u64);
                augment_index(pool, i, &self.aug, &mut rng)
            })
            .collect()
    }

    /// One optimizer step on `batch` at the scheduled learning rate.
    pub fn step(&mut self, batch: &[Sample], step_in_epoch: usize, steps_per_epoch: usize) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(config_err("empty batch"));
        }
        let s = self.model.input_size();
        let lr = lr_at(self.epoch, step_in_epoch, steps_per_epoch, &self.cfg) as f32;
        let images: Vec<&GrayImage> = batch.iter().map(|b| &b.image).collect();
        let (trace, preds) = self.model.forward(&self.store, batch_tensor(&images, s), Mode::Train)?;
        let boxes: Vec<_> = batch.iter().map(|b| b.boxes.clone()).collect();
        let grids = self.model.graph.grid_sizes(s);
        let assigned = assign_batch(&boxes, &self.anchors, &grids, DEFAULT_RATIO_THRESHOLD);
        let (loss, mut dpreds) = loss_and_gradient(&preds, &assigned.assignments, &self.anchors, &self.cfg.loss, None)?;
        // loss is reported per image; the optimized objective is the batch sum
        let scale = batch.len() as f64;
        for g in &mut dpreds {
            g.data.iter_mut().for_each(|v| *v *= scale);
        }
        let mut grads = self.model.backward(&self.store, &trace, &dpreds)?;
        let norm = grads.iter().flatten().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", self.global_step)));
        }
        let clip = self.cfg.optimizer.grad_clip;
        if clip > 0.0 && norm > clip {
            let k = (clip / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
        }
        trace.update_running_stats(&self.model.program, &mut self.store);
        let frozen = self.cfg.frozen_at(self.epoch);
        let o = &self.cfg.optimizer;
        let (mu, wd) = (o.momentum as f32, o.weight_decay as f32);
        for (i, spec) in self.model.program.params.iter().enumerate() {
            if frozen && self.backbone[i] {
                continue;
            }
            let decay = if spec.role.decays() { wd } else { 0.0 };
            let (p, v, g) = (&mut self.store.params[i], &mut self.momentum[i], &grads[i]);
            for ((w, m), &d) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                let d = d + decay * *w;
                *m = mu * *m + d;
                *w -= lr * if o.nesterov { d + mu * *m } else { *m };
            }
        }
        self.global_step += 1;
        if let Some(ema) = &mut self.ema {
            let decay = (0.9999 * (1.0 - (-(self.global_step as f64) / 2000.0).exp())) as f32;
            for (e, p) in ema.params.iter_mut().zip(&self.store.params) {
                for (a, b) in e.iter_mut().zip(p) {
                    *a = decay * *a + (1.0 - decay) * b;
                }
            }
            ema.buffers.clone_from(&self.store.buffers);
        }
        if !self.store.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged at step {}", self.global_step)));
        }
        Ok(loss)
    }

    /// One pass over the shuffled training pool; returns the mean losses.
    pub fn run_epoch(&mut self, pool: &dyn SamplePool) -> Result<LossBreakdown> {
        if pool.is_empty() {
            return Err(config_err("training partition is empty"));
        }
        let order = self.epoch_order(pool.len(), self.epoch);
        let bs = self.cfg.batch_size;
        let steps = order.len().div_ceil(bs);
        let mut mean = LossBreakdown::default();
        for (k, chunk) in order.chunks(bs).enumerate() {
            let batch = self.batch_samples(pool, chunk, self.epoch, k * bs)?;
            let l = self.step(&batch, k, steps)?;
            mean.box_loss += l.box_loss / steps as f64;
            mean.obj += l.obj / steps as f64;
            mean.cls += l.cls / steps as f64;
            mean.total += l.total / steps as f64;
            mean.assigned += l.assigned;
        }
        self.epoch += 1;
        Ok(mean)
    }

    pub fn validate(&self, pool: &dyn SamplePool, class_names: &[String]) -> Result<EvalReport> {
        let c = &self.cfg;
        evaluate_pool(self.model, self.eval_store(), &self.anchors, pool, class_names, c.batch_size, c.val_conf, c.val_nms_iou, c.val_iou)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Full run: gradient gate, then epochs with validation after each. When
/// `out_dir` is given, `best.ckpt`, `last.ckpt` and `runlog.jsonl` are kept
/// there; a numeric failure leaves `last_good.ckpt` behind.
pub fn train(
    trainer: &mut Trainer,
    train_pool: &dyn SamplePool,
    val_pool: &dyn SamplePool,
    class_names: &[String],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    ensure_gradient_gate()?;
    trainer.class_names = class_names.to_vec();
    if train_pool.is_empty() || val_pool.is_empty() {
        return Err(config_err("training and validation partitions must be non-empty"));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut log = RunLog::new(out_dir.map(|d| d.join("runlog.jsonl")));
    let mut best: Option<Checkpoint> = None;
    while trainer.epoch < trainer.cfg.epochs {
        let good = trainer.checkpoint(false);
        let lr = lr_at(trainer.epoch, 0, 1, &trainer.cfg);
        let loss = match trainer.run_epoch(train_pool) {
            Ok(l) => l,
            Err(Error::Numeric(msg)) => {
                let mut note = String::new();
                if let Some(d) = out_dir {
                    let p = d.join("last_good.ckpt");
                    good.save(&p)?;
                    note = format!("; last good state saved to {}", p.display());
                }
                return Err(Error::Numeric(format!("epoch {}: {msg}{note}", good.epoch)));
            }
            Err(e) => return Err(e),
        };
        let report = trainer.validate(val_pool, class_names)?;
        let is_best = best.is_none() && trainer.epoch == 1 || report.map50 > trainer.best_map;
        if is_best {
            trainer.best_map = report.map50;
        }
        let ck = trainer.checkpoint(is_best);
        if let Some(d) = out_dir {
            ck.save(&d.join("last.ckpt"))?;
            if is_best {
                ck.save(&d.join("best.ckpt"))?;
            }
        }
        if is_best {
            best = Some(ck);
        }
        log.append(EpochRecord {
            epoch: trainer.epoch - 1,
            lr,
            loss,
            val_precision: report.precision,
            val_recall: report.recall,
            val_map50: report.map50,
            best: is_best,
        })?;
    }
    let last = trainer.checkpoint(false);
    Ok(TrainOutcome { best: best.unwrap_or_else(|| last.clone()), last, log: log.records })
}
