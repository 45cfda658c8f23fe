//! Optimizers, learning-rate schedules and the training loop.

mod optim;

pub use optim::{
    adam_step, schedule_lr, sgd_nesterov_step, AdamState, DecayMode, OptimizerConfig, OptimizerFamily, Schedule,
    SgdState,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    augment_sample, channel_stats, confetti, oe_mix, stream_seed, AugmentPolicy, ChannelStats, ConfettiConfig, Dataset,
    Sample,
};
use crate::error::{config_err, numeric_err, FcddError, Result};
use crate::eval::prepare_batch;
use crate::loss::LossMode;
use crate::model::{FcnModel, LayerSpec};
use crate::numerics::{Checkpoint, Element, Mode, Tape, Tensor};
use crate::upsample::UpsamplePlan;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossMode,
    pub optimizer: OptimizerConfig,
    /// Probability that a nominal sample is replaced by an OE sample, or by
    /// its confetti-corrupted self when no OE corpus is given.
    pub oe_probability: f64,
    /// How often each labeled training anomaly appears per epoch.
    pub anomaly_repeat: usize,
    pub confetti: ConfettiConfig,
    pub augment: AugmentPolicy,
    /// Standardize inputs with per-channel statistics of the nominal split.
    pub normalize: bool,
    /// Upsampling σ for the pixel-wise loss.
    pub sigma: f64,
    pub seed: u64,
    /// Save `epoch_NNNN.ckpt` every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            loss: LossMode::Fcdd,
            optimizer: OptimizerConfig::adam(1e-3),
            oe_probability: 0.5,
            anomaly_repeat: 1,
            confetti: ConfettiConfig::default(),
            augment: AugmentPolicy::identity(),
            normalize: true,
            sigma: 1.2,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.oe_probability) {
            return Err(config_err!("oe probability {} is outside [0,1]", self.oe_probability));
        }
        if !(self.sigma > 0.0) {
            return Err(config_err!("sigma must be positive"));
        }
        if self.augment.normalize.is_some() {
            return Err(config_err!("set `normalize` instead of passing statistics in the augment policy"));
        }
        Ok(())
    }
}

/// One row per epoch: mean batch loss and the learning rate used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.lr));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| FcddError::io(path, e))
    }
}

/// Parameter-shaped optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimState<T> {
    Sgd(SgdState<T>),
    Adam(AdamState<T>),
}

impl<T: Element> OptimState<T> {
    pub fn new(family: OptimizerFamily) -> Self {
        match family {
            OptimizerFamily::SgdNesterov => OptimState::Sgd(SgdState::default()),
            OptimizerFamily::Adam => OptimState::Adam(AdamState::default()),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], cfg: &OptimizerConfig, lr: f64) -> Result<()> {
        match self {
            OptimState::Sgd(s) => sgd_nesterov_step(params, grads, s, lr, cfg.momentum, cfg.weight_decay),
            OptimState::Adam(s) => adam_step(params, grads, s, lr, cfg.betas, cfg.weight_decay, cfg.eps, cfg.decay_mode),
        }
    }

    fn save(&self, ck: &mut Checkpoint) {
        let (kind, step, groups): (f64, u64, Vec<(&str, &Vec<Tensor<T>>)>) = match self {
            OptimState::Sgd(s) => (0.0, 0, vec![("velocity", &s.velocity)]),
            OptimState::Adam(s) => (1.0, s.step, vec![("m", &s.m), ("v", &s.v)]),
        };
        ck.insert("optim.kind", &Tensor::<f64>::scalar(kind));
        ck.insert("optim.step", &Tensor::<f64>::scalar(step as f64));
        for (name, tensors) in groups {
            for (i, t) in tensors.iter().enumerate() {
                ck.insert(format!("optim.{name}.{i}"), t);
            }
        }
    }

    fn load(ck: &Checkpoint, family: OptimizerFamily, count: usize) -> Result<Self> {
        let kind: Tensor<f64> = ck.require("optim.kind")?;
        let expected = match family {
            OptimizerFamily::SgdNesterov => 0.0,
            OptimizerFamily::Adam => 1.0,
        };
        if kind.data()[0] != expected {
            return Err(config_err!("checkpoint optimizer differs from the configured one"));
        }
        let group = |name: &str| -> Result<Vec<Tensor<T>>> {
            if ck.get(&format!("optim.{name}.0")).is_none() {
                return Ok(Vec::new());
            }
            (0..count).map(|i| ck.require(&format!("optim.{name}.{i}"))).collect()
        };
        Ok(match family {
            OptimizerFamily::SgdNesterov => OptimState::Sgd(SgdState {
                velocity: group("velocity")?,
            }),
            OptimizerFamily::Adam => OptimState::Adam(AdamState {
                m: group("m")?,
                v: group("v")?,
                step: ck.require::<f64>("optim.step")?.data()[0] as u64,
            }),
        })
    }
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: TrainLog,
    /// Input statistics the model was trained with.
    pub stats: Option<ChannelStats>,
    pub optim: OptimState<T>,
}

/// Full training state as a checkpoint: model, optimizer, input statistics,
/// completed epochs and the log so far.
pub fn training_checkpoint<T: Element>(
    model: &FcnModel<T>,
    optim: &OptimState<T>,
    stats: Option<&ChannelStats>,
    log: &TrainLog,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    model.to_checkpoint(&mut ck);
    save_stats(&mut ck, stats);
    ck.insert("meta.epoch", &Tensor::<f64>::scalar(log.rows.len() as f64));
    if !log.rows.is_empty() {
        let data = log.rows.iter().flat_map(|r| [r.epoch as f64, r.loss, r.lr]).collect();
        ck.insert("meta.log", &Tensor::new(vec![log.rows.len(), 3], data).expect("log shape"));
    }
    optim.save(&mut ck);
    ck
}

pub fn save_stats(ck: &mut Checkpoint, stats: Option<&ChannelStats>) {
    if let Some(s) = stats {
        let c = s.mean.len();
        ck.insert("meta.norm_mean", &Tensor::new(vec![c], s.mean.clone()).expect("stats shape"));
        ck.insert("meta.norm_std", &Tensor::new(vec![c], s.std.clone()).expect("stats shape"));
    }
}

pub fn load_stats(ck: &Checkpoint) -> Result<Option<ChannelStats>> {
    if ck.get("meta.norm_mean").is_none() {
        return Ok(None);
    }
    let mean: Tensor<f32> = ck.require("meta.norm_mean")?;
    let std: Tensor<f32> = ck.require("meta.norm_std")?;
    Ok(Some(ChannelStats {
        mean: mean.into_data(),
        std: std.into_data(),
    }))
}

fn load_log(ck: &Checkpoint) -> Result<TrainLog> {
    if ck.get("meta.log").is_none() {
        return Ok(TrainLog::default());
    }
    let t: Tensor<f64> = ck.require("meta.log")?;
    let rows = t
        .data()
        .chunks(3)
        .map(|r| LogRow {
            epoch: r[0] as usize,
            loss: r[1],
            lr: r[2],
        })
        .collect();
    Ok(TrainLog { rows })
}

/// Trains `model` from scratch on `train_set` (nominal samples plus any
/// labeled anomalies) with an optional outlier-exposure corpus.
pub fn train<T: Element>(
    model: &mut FcnModel<T>,
    train_set: &Dataset,
    oe: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let optim = OptimState::new(cfg.optimizer.family);
    run(model, optim, TrainLog::default(), train_set, oe, cfg)
}

/// Continues a run from a checkpoint written by [`training_checkpoint`]. With
/// the same data and config the result equals an uninterrupted run.
pub fn resume<T: Element>(
    model: &mut FcnModel<T>,
    ck: &Checkpoint,
    train_set: &Dataset,
    oe: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    *model = FcnModel::from_checkpoint(model.spec(), ck)?;
    let count = model.parameters().len();
    let optim = OptimState::load(ck, cfg.optimizer.family, count)?;
    let log = load_log(ck)?;
    run(model, optim, log, train_set, oe, cfg)
}

const EPOCH_STREAM: u64 = 0x5348_5546;
const SAMPLE_STREAM: u64 = 0x5341_4d50;

/// Builds one training sample: OE replacement or confetti injection, then
/// augmentation and normalization.
fn prepare_sample(
    sample: &Sample,
    oe: &Dataset,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let mut s = if !oe.is_empty() {
        oe_mix(vec![sample.clone()], oe, cfg.oe_probability, rng)?.remove(0)
    } else if !sample.label && cfg.oe_probability > 0.0 && rng.random_bool(cfg.oe_probability) {
        let (image, mask) = confetti(&sample.image, &cfg.confetti, rng)?;
        Sample {
            id: sample.id.clone(),
            image,
            label: true,
            mask: Some(mask),
        }
    } else {
        sample.clone()
    };
    if s.image.shape() != sample.image.shape() {
        return Err(config_err!(
            "OE sample '{}' has shape {:?}, training images are {:?}",
            s.id,
            s.image.shape(),
            sample.image.shape()
        ));
    }
    s = augment_sample(&s, policy, rng)?;
    Ok(s)
}

fn has_batchnorm<T: Element>(model: &FcnModel<T>) -> bool {
    model.spec().layers().iter().any(|l| matches!(l, LayerSpec::BatchNorm))
}

fn batch_loss<T: Element>(
    model: &mut FcnModel<T>,
    batch: &[Sample],
    stats: Option<&ChannelStats>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let x: Tensor<T> = prepare_batch(batch, stats)?;
    let labels: Vec<bool> = batch.iter().map(|s| s.label).collect();
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let fwd = model.forward_tape(&mut tape, input, Mode::Train, true)?;
    let loss = match cfg.loss {
        LossMode::Hsc => tape.hsc_loss(fwd.output, &labels)?,
        LossMode::Fcdd => {
            let a = tape.pseudo_huber_map(fwd.output)?;
            tape.fcdd_loss(a, &labels)?
        }
        LossMode::FcddPixel => {
            let a = tape.pseudo_huber_map(fwd.output)?;
            let [_, _, u, v] = tape.value(a).dims4()?;
            let (h, w) = batch[0].size();
            let plan = UpsamplePlan::new(&model.receptive_field(), cfg.sigma, (u, v), (h, w))?;
            let up = tape.upsample(a, &plan)?;
            let masks: Tensor<T> = Dataset::stack_masks(batch)?.cast();
            tape.pixel_loss(up, &masks)?
        }
    };
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|&p| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(tape.value(p).shape())))
        .collect::<Vec<_>>();
    for g in &grads {
        g.ensure_finite("gradient")?;
    }
    Ok((value, grads))
}

fn run<T: Element>(
    model: &mut FcnModel<T>,
    mut optim: OptimState<T>,
    mut log: TrainLog,
    train_set: &Dataset,
    oe: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let nominal: Vec<&Sample> = train_set.samples.iter().filter(|s| !s.label).collect();
    if nominal.is_empty() {
        return Err(config_err!("training set has no nominal samples"));
    }
    train_set.image_shape()?;
    let stats = if cfg.normalize {
        Some(channel_stats(train_set)?)
    } else {
        None
    };
    let policy = cfg.augment.clone();
    let bn = has_batchnorm(model);
    if bn && cfg.batch_size < 2 {
        return Err(config_err!("batch size must be at least 2 with batchnorm"));
    }
    let mut pool: Vec<&Sample> = nominal;
    for s in train_set.samples.iter().filter(|s| s.label) {
        pool.extend(std::iter::repeat_n(s, cfg.anomaly_repeat));
    }
    let start = log.rows.len();
    for epoch in start..cfg.epochs {
        let lr = schedule_lr(epoch, &cfg.optimizer);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[EPOCH_STREAM, epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // a trailing single sample cannot be batch-normalized
            if bn && chunk.len() < 2 {
                continue;
            }
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(j, &k)| {
                    let pos = (b * cfg.batch_size + j) as u64;
                    let seed = stream_seed(cfg.seed, &[SAMPLE_STREAM, epoch as u64, pos]);
                    prepare_sample(pool[k], oe, cfg, &policy, &mut ChaCha8Rng::seed_from_u64(seed))
                })
                .collect::<Result<Vec<_>>>()?;
            let snapshot = model.clone();
            let step = batch_loss(model, &batch, stats.as_ref(), cfg).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(numeric_err!("loss became {loss}"));
                }
                optim.step(&mut model.parameters_mut(), &grads, &cfg.optimizer, lr)?;
                for p in model.parameters() {
                    p.1.ensure_finite("parameter update")?;
                }
                Ok(loss)
            });
            match step {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(FcddError::Numeric(msg)) => {
                    let where_ = save_diagnostic(&snapshot, &optim, stats.as_ref(), &log, cfg)?;
                    return Err(numeric_err!("epoch {}: {msg}{where_}", epoch + 1));
                }
                Err(e) => return Err(e),
            }
        }
        if batches == 0 {
            return Err(config_err!("no trainable batch: {} samples with batch size {}", pool.len(), cfg.batch_size));
        }
        log.rows.push(LogRow {
            epoch: epoch + 1,
            loss: total / batches as f64,
            lr,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let ck = training_checkpoint(model, &optim, stats.as_ref(), &log);
                ck.save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { log, stats, optim })
}

fn save_diagnostic<T: Element>(
    model: &FcnModel<T>,
    optim: &OptimState<T>,
    stats: Option<&ChannelStats>,
    log: &TrainLog,
    cfg: &TrainConfig,
) -> Result<String> {
    match &cfg.checkpoint_dir {
        Some(dir) => {
            let path = dir.join("diverged.ckpt");
            training_checkpoint(model, optim, stats, log).save(&path)?;
            Ok(format!(" (state before the failing step saved to {})", path.display()))
        }
        None => Ok(String::new()),
    }
}
