//! Epoch loop: minibatch ADAM on weighted cross-entropy or Dice, per-epoch
//! validation, early stopping, best-epoch selection and resumable
//! checkpoints.
//!
//! Per-sample gradients are computed independently (possibly in parallel)
//! and summed in sample order, so the result does not depend on the worker
//! count.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState, EarlyStopController};
use crate::checkpoint::{
    param_tensors, Checkpoint, CheckpointRecord, ADAM_M_PREFIX, ADAM_T_KEY, ADAM_V_PREFIX,
    TRAIN_PREFIX,
};
use crate::data::{augment_corpus, derive_seed, epoch_order, pixel_statistics, split, AugmentSpec, ChannelMeans, Sample};
use crate::error::{Error, Result};
use crate::losses::{class_weights, multiclass_dice_loss, weighted_cross_entropy, ClassWeights, WeightScheme};
use crate::tensor::{DropoutMode, Tensor};
use crate::unet::{self, UNetConfig, UNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "weighted-ce")]
    WeightedCrossEntropy,
    #[serde(rename = "dice")]
    Dice,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-ce" => Ok(Self::WeightedCrossEntropy),
            "dice" => Ok(Self::Dice),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected weighted-ce or dice)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub loss: LossKind,
    pub weight_scheme: WeightScheme,
    pub patience: usize,
    pub seed: u64,
    /// Keep `eta` fixed instead of decaying it as `eta/√t`.
    pub constant_eta: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Share of source images used for training; 1 disables validation
    /// and model selection then scores the training split.
    pub train_fraction: f64,
    /// Parallel per-sample workers; 0 uses every available core.
    pub workers: usize,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            max_epochs: 30,
            batch_size: 32,
            eta: adam.eta,
            loss: LossKind::WeightedCrossEntropy,
            weight_scheme: WeightScheme::MedianFrequency,
            patience: 10,
            seed: 0,
            constant_eta: false,
            beta1: adam.beta1,
            beta2: adam.beta2,
            lambda: adam.lambda,
            epsilon: adam.epsilon,
            train_fraction: 0.8,
            workers: 0,
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            eta: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            lambda: self.lambda,
            epsilon: self.epsilon,
            constant_eta: self.constant_eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        self.augment.validate()?;
        self.adam().validate()
    }

    /// Every field that influences the trained weights.
    fn protocol(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut v = match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        v.remove("max_epochs");
        v.remove("workers");
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStopping => "early-stopping",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Wall time; not stored in checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    /// Validation metrics come from the training split.
    pub validated_on_train: bool,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "epoch,train_loss,train_acc,val_loss,val_acc,seconds")?;
            for r in &self.records {
                let secs = r.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, secs
                )?;
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        crate::eval::write_json(path, self)
    }
}

/// Everything beyond the parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub protocol: serde_json::Map<String, serde_json::Value>,
    pub epochs_completed: usize,
    pub early_stop: EarlyStopController,
    pub log: TrainLog,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: UNetParams<f32>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    /// `model.cseg`, `trainlog.csv` and `summary.json` in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(&dir.join("model.cseg"))?;
        self.log.write_csv(&dir.join("trainlog.csv"))?;
        self.log.write_summary(&dir.join("summary.json"))
    }
}

/// Training and validation sets after normalisation and augmentation.
struct Prepared {
    train: Vec<(Tensor<f32>, Tensor<f32>)>,
    val: Vec<(Tensor<f32>, Tensor<f32>)>,
    means: ChannelMeans,
    weights: ClassWeights,
    validated_on_train: bool,
}

fn prepare(
    corpus: &[Sample],
    model: &UNetConfig,
    cfg: &TrainConfig,
    stored: Option<&CheckpointRecord>,
) -> Result<Prepared> {
    if corpus.is_empty() {
        return Err(Error::Config("training split is empty: the corpus has no samples".into()));
    }
    let (mut train, mut val) = if cfg.train_fraction < 1.0 {
        split(corpus, cfg.train_fraction, cfg.seed)?
    } else {
        (corpus.to_vec(), Vec::new())
    };
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for s in train.iter().chain(&val) {
        let shape = s.image.shape();
        if shape != [model.input_size, model.input_size, model.input_channels] {
            return Err(Error::Config(format!(
                "sample `{}` has shape {:?}, model expects {}×{}×{}",
                s.source_id, shape, model.input_size, model.input_size, model.input_channels
            )));
        }
        if let Some(&c) = s.mask.classes.iter().find(|&&c| c as usize >= model.num_classes) {
            return Err(Error::Config(format!(
                "mask `{}` contains class {c} but the model has {} classes",
                s.source_id, model.num_classes
            )));
        }
    }
    let (weights, means) = match stored {
        Some(CheckpointRecord {
            class_weights: Some(w),
            channel_means,
            ..
        }) => (w.clone(), channel_means.clone()),
        _ => {
            let (counts, presence) = pixel_statistics(train.iter().map(|s| &s.mask), model.num_classes);
            let weights = class_weights(&counts, &presence, cfg.weight_scheme)?;
            (weights, ChannelMeans::compute(&train)?)
        }
    };
    for s in train.iter_mut().chain(val.iter_mut()) {
        means.apply(&mut s.image);
    }
    let train = augment_corpus(&train, &cfg.augment, derive_seed(cfg.seed, &[0xa119]))?;
    let val = augment_corpus(&val, &cfg.augment, derive_seed(cfg.seed, &[0x7a1]))?;
    let encode = |v: Vec<Sample>| -> Result<Vec<_>> {
        v.into_iter()
            .map(|s| Ok((s.image, s.mask.one_hot(model.num_classes)?)))
            .collect()
    };
    let validated_on_train = val.is_empty();
    Ok(Prepared {
        train: encode(train)?,
        val: encode(val)?,
        means,
        weights,
        validated_on_train,
    })
}

fn objective(
    loss: LossKind,
    logits: &Tensor<f32>,
    labels: &Tensor<f32>,
    alpha: &[f64],
) -> Result<(f64, Tensor<f32>)> {
    let (value, grad) = match loss {
        LossKind::WeightedCrossEntropy => weighted_cross_entropy(logits, labels, alpha)?,
        LossKind::Dice => multiclass_dice_loss(logits, labels)?,
    };
    Ok((value.loss, grad))
}

/// Argmax hits against one-hot labels.
fn correct_pixels(logits: &Tensor<f32>, labels: &Tensor<f32>) -> usize {
    let k = logits.channels();
    logits
        .data()
        .chunks_exact(k)
        .zip(labels.data().chunks_exact(k))
        .filter(|(z, y)| {
            let mut best = 0;
            for i in 1..k {
                if z[i] > z[best] {
                    best = i;
                }
            }
            y[best] == 1.0
        })
        .count()
}

/// Mean loss and pixel accuracy in inference mode.
pub fn evaluate_split(
    params: &UNetParams<f32>,
    set: &[(Tensor<f32>, Tensor<f32>)],
    loss: LossKind,
    alpha: &[f64],
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let per: Vec<(f64, usize, usize)> = set
        .par_iter()
        .map(|(x, y)| {
            let logits = unet::infer(params, x)?;
            let (l, _) = objective(loss, &logits, y, alpha)?;
            Ok((l, correct_pixels(&logits, y), y.len() / y.channels()))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let hits: usize = per.iter().map(|p| p.1).sum();
    let total: usize = per.iter().map(|p| p.2).sum();
    Ok((loss, hits as f64 / total as f64))
}

struct RunState {
    params: UNetParams<f32>,
    best: UNetParams<f32>,
    adam: AdamState<f32>,
    early_stop: EarlyStopController,
    log: TrainLog,
    epochs_completed: usize,
}

fn run_epochs(state: &mut RunState, data: &Prepared, model: &UNetConfig, cfg: &TrainConfig) -> Result<()> {
    let adam_cfg = cfg.adam();
    let alpha = &data.weights.alpha;
    let workers = if cfg.workers == 0 {
        rayon::current_num_threads()
    } else {
        cfg.workers
    };
    let keys = state.params.tensor_keys();

    while state.epochs_completed < cfg.max_epochs && state.log.stop_reason != Some(StopReason::EarlyStopping) {
        let epoch = state.epochs_completed;
        let started = Instant::now();
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut hits, mut pixels) = (0.0f64, 0usize, 0usize);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let mut acc = UNetParams::<f32>::zeros(model)?;
            let mut batch_loss = 0.0;
            for group in batch.chunks(workers) {
                let params = &state.params;
                let results: Vec<_> = group
                    .par_iter()
                    .map(|&i| {
                        let (x, y) = &data.train[i];
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            cfg.seed,
                            &[epoch as u64, b as u64, i as u64],
                        ));
                        let (logits, trace) = unet::forward(params, x, DropoutMode::Train, &mut rng)?;
                        let (l, g) = objective(cfg.loss, &logits, y, alpha)?;
                        let grads = unet::backward(params, &trace, &g.map(|v| v * scale))?;
                        Ok((l, correct_pixels(&logits, y), y.len() / y.channels(), grads))
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| match e {
                        Error::InvalidInput(m) | Error::Training(m) => {
                            Error::Training(format!("epoch {} batch {}: {m}", epoch + 1, b + 1))
                        }
                        other => other,
                    })?;
                for (l, h, n, g) in results {
                    batch_loss += l;
                    hits += h;
                    pixels += n;
                    acc.add_assign(&g);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            loss_sum += batch_loss;
            let grads = acc.tensors();
            let mut params = state.params.tensors_mut();
            adam_step(&mut state.adam, &mut params, &grads, &adam_cfg).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {} batch {}: {m}", epoch + 1, b + 1)),
                other => other,
            })?;
        }
        debug_assert_eq!(state.adam.keys, keys);

        let eval_set = if data.validated_on_train { &data.train } else { &data.val };
        let (val_loss, val_acc) = evaluate_split(&state.params, eval_set, cfg.loss, alpha)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / data.train.len() as f64,
            train_acc: hits as f64 / pixels as f64,
            val_loss,
            val_acc,
            seconds: Some(started.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {}: loss {:.5} acc {:.4} val_loss {:.5} val_acc {:.4}",
            record.epoch,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        state.log.records.push(record);
        state.epochs_completed += 1;

        let stop = state.early_stop.should_stop(val_acc);
        if state.early_stop.improved_last() {
            state.best = state.params.clone();
            state.log.best_epoch = Some(epoch + 1);
            state.log.best_val_acc = Some(val_acc);
        }
        if stop {
            state.log.stop_reason = Some(StopReason::EarlyStopping);
        }
    }
    if state.log.stop_reason.is_none() {
        state.log.stop_reason = Some(StopReason::MaxEpochs);
    }
    Ok(())
}

fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Training(format!("worker pool: {e}")))?;
    pool.install(f)
}

fn finish(state: RunState, data: &Prepared, model: &UNetConfig, cfg: &TrainConfig) -> TrainOutcome {
    let mut stored_log = state.log.clone();
    stored_log.records.iter_mut().for_each(|r| r.seconds = None);
    let mut tensors = param_tensors(&state.best, "");
    tensors.extend(param_tensors(&state.params, TRAIN_PREFIX));
    let shapes = state.params.tensor_shapes();
    for (i, key) in state.adam.keys.iter().enumerate() {
        let shape = shapes[i].clone();
        tensors.push((
            format!("{ADAM_M_PREFIX}{key}"),
            Tensor::new(&shape, state.adam.m[i].clone()).expect("moment shape"),
        ));
        tensors.push((
            format!("{ADAM_V_PREFIX}{key}"),
            Tensor::new(&shape, state.adam.v[i].clone()).expect("moment shape"),
        ));
    }
    tensors.push((
        ADAM_T_KEY.into(),
        Tensor::new(&[], vec![state.adam.t as f32]).expect("scalar"),
    ));
    let checkpoint = Checkpoint {
        record: CheckpointRecord {
            model: model.clone(),
            channel_means: data.means.clone(),
            class_weights: Some(data.weights.clone()),
            training: Some(TrainState {
                protocol: cfg.protocol(),
                epochs_completed: state.epochs_completed,
                early_stop: state.early_stop,
                log: stored_log,
            }),
        },
        tensors,
    };
    TrainOutcome {
        params: state.best,
        log: state.log,
        checkpoint,
    }
}

/// Train from scratch on `corpus` (unnormalised samples, as returned by
/// [`crate::data::load_corpus`]).
pub fn train(corpus: &[Sample], model: &UNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    with_pool(cfg.workers, || {
        let data = prepare(corpus, model, cfg, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1417]));
        let params: UNetParams<f32> = unet::build(model, &mut rng)?;
        let lengths: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let mut state = RunState {
            best: params.clone(),
            adam: AdamState::new(params.tensor_keys(), &lengths),
            params,
            early_stop: EarlyStopController::new(cfg.patience),
            log: TrainLog {
                records: Vec::new(),
                stop_reason: None,
                best_epoch: None,
                best_val_acc: None,
                validated_on_train: data.validated_on_train,
                warnings: Vec::new(),
            },
            epochs_completed: 0,
        };
        run_epochs(&mut state, &data, model, cfg)?;
        Ok(finish(state, &data, model, cfg))
    })
}

/// Continue a run from a training checkpoint. `model`, when given, must
/// match the stored network configuration. Changed protocol settings are
/// applied and reported as warnings in the log.
pub fn resume(
    checkpoint: &Checkpoint,
    corpus: &[Sample],
    model: Option<&UNetConfig>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let record = &checkpoint.record;
    let stored_model = &record.model;
    if let Some(m) = model {
        if m != stored_model {
            let what = if m.num_classes != stored_model.num_classes {
                format!(
                    "num_classes {} does not match checkpoint's {}",
                    m.num_classes, stored_model.num_classes
                )
            } else {
                "model configuration differs from the checkpoint".into()
            };
            return Err(Error::Config(what));
        }
    }
    let ts = record
        .training
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint holds no training state to resume".into()))?;
    cfg.validate()?;
    let mut warnings = Vec::new();
    let current = cfg.protocol();
    for (k, v) in &current {
        match ts.protocol.get(k) {
            Some(old) if old == v => {}
            Some(old) => warnings.push(format!("config drift: {k} changed from {old} to {v}")),
            None => warnings.push(format!("config drift: {k} not recorded in checkpoint")),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    with_pool(cfg.workers, || {
        let data = prepare(corpus, stored_model, cfg, Some(record))?;
        let params = checkpoint.params(TRAIN_PREFIX)?;
        let best = checkpoint.params("")?;
        let keys = params.tensor_keys();
        let mut adam = AdamState::<f32>::new(keys.clone(), &[]);
        for key in &keys {
            let get = |p: &str| {
                checkpoint
                    .tensor(&format!("{p}{key}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint {
                        path: Default::default(),
                        reason: format!("missing optimizer tensor `{p}{key}`"),
                    })
            };
            adam.m.push(get(ADAM_M_PREFIX)?);
            adam.v.push(get(ADAM_V_PREFIX)?);
        }
        adam.t = checkpoint
            .tensor(ADAM_T_KEY)
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| Error::Checkpoint {
                path: Default::default(),
                reason: format!("missing `{ADAM_T_KEY}`"),
            })? as u64;

        let mut log = ts.log.clone();
        if log.stop_reason == Some(StopReason::MaxEpochs) {
            log.stop_reason = None;
        }
        log.warnings.extend(warnings.iter().cloned());
        let mut early_stop = ts.early_stop.clone();
        early_stop.patience = cfg.patience;
        let mut state = RunState {
            params,
            best,
            adam,
            early_stop,
            log,
            epochs_completed: ts.epochs_completed,
        };
        run_epochs(&mut state, &data, stored_model, cfg)?;
        Ok(finish(state, &data, stored_model, cfg))
    })
}
