//! Losses, optimizer, learning-rate schedule, the training loop, checkpoints
//! and the finite-difference gradient check.

mod checkpoint;
mod gradcheck;
mod losses;
mod madgrad;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CKPT_MAGIC};
pub use gradcheck::{gradient_check, micro_config, micro_fixture, GradCheckReport, GroupError, MicroFixture};
pub use losses::{bce_loss, check_weights, combined_loss, combined_loss_var, dice_loss};
pub use madgrad::{Madgrad, Slot};

use crate::dataset::{Batch, BatchIter, CineClip, Manifest, MaskClip, View};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Graph, Model};
use crate::preprocess::{augment, AugmentConfig, DataConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub momentum: f64,
    pub optimizer_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dice_smooth: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_every: 100,
            decay_factor: 0.1,
            w_bce: 0.5,
            w_dice: 0.5,
            momentum: 0.9,
            optimizer_eps: 1e-6,
            epochs: 300,
            batch_size: 2,
            seed: 0,
            dice_smooth: 1.0,
            checkpoint_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_every and decay_factor must be positive".into()));
        }
        check_weights(self.w_bce, self.w_dice)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.optimizer_eps > 0.0) || !(self.dice_smooth > 0.0) {
            return Err(Error::Config("optimizer_eps and dice_smooth must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor^floor(epoch / decay_every)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

/// Which clips train the model and whether the view prompt is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "sax")]
    Sax,
    #[serde(rename = "lax")]
    Lax,
    #[serde(rename = "multi")]
    Multi,
    #[serde(rename = "multi-prompt")]
    MultiPrompt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Sax, TrainMode::Lax, TrainMode::Multi, TrainMode::MultiPrompt];

    pub fn views(self) -> &'static [View] {
        match self {
            TrainMode::Sax => &[View::Sax],
            TrainMode::Lax => &[View::Lax],
            TrainMode::Multi | TrainMode::MultiPrompt => &[View::Sax, View::Lax],
        }
    }

    pub fn prompted(self) -> bool {
        self == TrainMode::MultiPrompt
    }

    pub fn filter(self, manifest: &Manifest) -> Manifest {
        manifest.filter_views(self.views())
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Sax => "sax",
            TrainMode::Lax => "lax",
            TrainMode::Multi => "multi",
            TrainMode::MultiPrompt => "multi-prompt",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown mode {s:?} (expected sax, lax, multi or multi-prompt)")))
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_dice: Option<f64>,
}

/// Model, optimizer state and bookkeeping of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Madgrad,
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub mode: TrainMode,
    /// Preparation the training clips went through; reapplied at inference.
    pub data: DataConfig,
    /// `[height, width, phases]` of the clips seen so far.
    pub input_dims: Option<[usize; 3]>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, augment: AugmentConfig, mode: TrainMode) -> Result<Self> {
        config.validate()?;
        augment.validate()?;
        let optimizer = Madgrad::new(
            config.momentum,
            config.optimizer_eps,
            model.params.iter().filter(|p| !p.frozen).map(|p| (p.name.as_str(), p.value.data())),
        )?;
        Ok(Self {
            model,
            optimizer,
            config,
            augment,
            mode,
            data: DataConfig::default(),
            input_dims: None,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One optimizer step on `batch`; returns the batch loss and the mean
    /// per-clip Dice of the thresholded logits.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64)> {
        let d = batch.dims;
        let shape = vec![batch.len(), 1, d.height, d.width, d.phases];
        let mut g = Graph::bind(&self.model.params, true);
        let x = g.tape.constant(Tensor::new(shape, batch.images.clone()));
        let views: Vec<View> = batch.metas.iter().map(|m| m.view).collect();
        let logits = self.model.forward(&mut g, x, self.mode.prompted().then_some(views.as_slice()))?;
        let target: Vec<f32> = batch.masks.iter().map(|v| *v as f32).collect();
        let c = &self.config;
        let loss = combined_loss_var(&mut g.tape, logits, &target, batch.len(), c.w_bce, c.w_dice, c.dice_smooth);
        let value = g.tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {value} at epoch {} step {}",
                self.epoch, self.optimizer.step
            )));
        }
        let pred = metrics::binarize(g.tape.value(logits).data(), 0.0);
        let per = d.voxels();
        let mut dice = 0.0;
        for (p, y) in pred.chunks(per).zip(batch.masks.chunks(per)) {
            dice += metrics::dice_score(p, y)?;
        }
        let mut grads = g.tape.backward(loss);
        let vars: Vec<_> = g
            .params()
            .iter()
            .filter(|(name, _)| !self.model.params.get(name).is_some_and(|p| p.frozen))
            .map(|(_, v)| *v)
            .collect();
        let grad_data: Vec<Vec<f32>> = vars
            .iter()
            .zip(&self.optimizer.slots)
            .map(|(v, slot)| grads.take(*v).unwrap_or_else(|| vec![0.0; slot.x0.len()]))
            .collect();
        let grad_refs: Vec<&[f32]> = grad_data.iter().map(|g| g.as_slice()).collect();
        let mut params: Vec<&mut [f32]> =
            self.model.params.iter_mut().filter(|p| !p.frozen).map(|p| p.value.data_mut()).collect();
        self.optimizer.step(lr, &mut params, &grad_refs)?;
        Ok((value, dice / batch.len() as f64))
    }

    /// Trains one epoch over `clips` (already filtered to the mode's views).
    pub fn run_epoch(&mut self, clips: &[(CineClip, MaskClip)]) -> Result<EpochRecord> {
        if clips.is_empty() {
            return Err(Error::InvalidParams("no training clips".into()));
        }
        for (c, _) in clips {
            let d = [c.dims.height, c.dims.width, c.dims.phases];
            match self.input_dims {
                None => self.input_dims = Some(d),
                Some(seen) if seen != d => {
                    return Err(Error::DimensionMismatch(format!(
                        "clip {:?} is {}, training geometry is {}x{}x{}",
                        c.meta.scan_id, c.dims, seen[0], seen[1], seen[2]
                    )))
                }
                Some(_) => {}
            }
        }
        let epoch = self.epoch;
        let lr = lr_at_epoch(&self.config, epoch);
        let prepared = clips
            .iter()
            .enumerate()
            .map(|(i, (c, m))| {
                if self.config.augment {
                    let seed = rng::derive_seed(self.config.seed, &[rng::tag("augment"), epoch as u64, i as u64]);
                    augment(c, m, seed, &self.augment)
                } else {
                    Ok((c.clone(), m.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
        for batch in BatchIter::new(prepared, self.config.batch_size, self.config.seed, epoch)? {
            let (loss, dice) = self.train_step(&batch, lr)?;
            loss_sum += loss * batch.len() as f64;
            dice_sum += dice * batch.len() as f64;
        }
        let n = clips.len() as f64;
        let record = EpochRecord { epoch, lr, loss: loss_sum / n, train_dice: Some(dice_sum / n) };
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }

    /// Mean per-clip Dice on `clips`, without augmentation.
    pub fn evaluate_dice(&self, clips: &[(CineClip, MaskClip)]) -> Result<f64> {
        evaluate_dice(&self.model, clips, self.mode.prompted())
    }
}

/// Forward pass over one clip at a time; returns thresholded masks.
pub fn predict_masks(model: &Model<f32>, clips: &[(CineClip, MaskClip)], prompted: bool) -> Result<Vec<MaskClip>> {
    clips
        .iter()
        .map(|(c, _)| predict_clip(model, c, prompted.then_some(c.meta.view)))
        .collect()
}

pub fn predict_clip(model: &Model<f32>, clip: &CineClip, view: Option<View>) -> Result<MaskClip> {
    let d = clip.dims;
    let dims = crate::model::BatchDims { batch: 1, height: d.height, width: d.width, phases: d.phases };
    let views = view.map(|v| [v]);
    let logits = model.predict_logits(&clip.data, dims, views.as_ref().map(|v| v.as_slice()))?;
    MaskClip::new(d, metrics::binarize(&logits, 0.0))
}

pub fn evaluate_dice(model: &Model<f32>, clips: &[(CineClip, MaskClip)], prompted: bool) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidParams("no clips to evaluate".into()));
    }
    let preds = predict_masks(model, clips, prompted)?;
    let mut sum = 0.0;
    for (p, (_, m)) in preds.iter().zip(clips) {
        sum += metrics::dice_score(&p.data, &m.data)?;
    }
    Ok(sum / clips.len() as f64)
}

/// Where and how often [`train_loop`] writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    pub out_dir: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn append_log(path: &Path, record: &EpochRecord, wall_seconds: f64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str("epoch,lr,loss,train_dice,wall_seconds\n");
    }
    let dice = record.train_dice.map(|d| d.to_string()).unwrap_or_default();
    line.push_str(&format!("{},{},{},{},{:.3}\n", record.epoch, record.lr, record.loss, dice, wall_seconds));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs epochs until `trainer.config.epochs` are complete, writing the CSV log,
/// periodic checkpoints and the final checkpoint when `out_dir` is set. On a
/// non-finite loss or gradient the error is returned and the trainer keeps the
/// state of the last completed step; checkpoints already on disk are untouched.
pub fn train_loop(trainer: &mut Trainer, clips: &[(CineClip, MaskClip)], opts: &LoopOptions) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    while trainer.epoch < trainer.config.epochs {
        let record = trainer.run_epoch(clips)?;
        let wall = start.elapsed().as_secs_f64();
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  lr {:.2e}  loss {:.5}  train dice {:.4}  ({wall:.1}s)",
                record.epoch,
                record.lr,
                record.loss,
                record.train_dice.unwrap_or(f64::NAN)
            );
        }
        if let Some(dir) = &opts.out_dir {
            append_log(&dir.join(LOG_FILE), &record, wall)?;
            let every = trainer.config.checkpoint_every;
            if every > 0 && trainer.epoch.is_multiple_of(every) && trainer.epoch < trainer.config.epochs {
                trainer.checkpoint().save(dir.join(format!("epoch_{:04}.ckpt", trainer.epoch)))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        trainer.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
