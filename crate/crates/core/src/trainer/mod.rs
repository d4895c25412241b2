//! Epoch loop, validation, callbacks, evaluation and history.

pub mod checkpoint;
mod papernet;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
pub use papernet::{build_papernet, papernet_spec, MIN_IMAGE_SIZE};

use serde::{Deserialize, Serialize};

use crate::data::{for_each_batch, AugmentParams, BatchConfig, Dataset};
use crate::error::{Error, Result};
use crate::layers::{softmax, Backprop, Mode};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::model::Model;
use crate::optim::{categorical_crossentropy, Adam, AdamConfig, EarlyStopping, PlateauScheduler, StopDecision};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
            min_delta: 1e-4,
            min_lr: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { patience: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub image_size: usize,
    pub seed: u64,
    pub augment: AugmentParams,
    pub val_fraction: f64,
    /// Data-pipeline threads; results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr0: 1e-4,
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            image_size: 176,
            seed: 0,
            augment: AugmentParams::default(),
            val_fraction: 0.2,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Epoch at which early stopping fired, if it did.
    pub stopped_epoch: Option<usize>,
}

impl TrainHistory {
    /// One JSON object per epoch, newline terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        let best = self.best_epoch?;
        self.records.iter().find(|r| r.epoch == best)
    }
}

/// Outcome of running a model over a dataset in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub loss: f64,
    pub predictions: Vec<usize>,
    /// Softmax probability of each class, per sample.
    pub probabilities: Vec<[f32; 2]>,
}

fn argmax_rows(p: &Tensor<f32>) -> Vec<usize> {
    p.data()
        .chunks(2)
        .map(|r| usize::from(r[1] > r[0]))
        .collect()
}

fn eval_batches(model: &Model<f32>, batch_size: usize, workers: usize) -> BatchConfig {
    BatchConfig {
        batch_size,
        image_size: model.spec().image_size,
        shuffle: false,
        augment: AugmentParams::rescale_only(),
        seed: 0,
        workers,
    }
}

/// Evaluation-mode pass in dataset order: argmax predictions, metrics and mean loss.
pub fn evaluate(model: &mut Model<f32>, ds: &Dataset, batch_size: usize, workers: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let prev = model.mode();
    model.set_mode(Mode::Evaluation);
    let cfg = eval_batches(model, batch_size, workers);
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(ds.len());
    let mut probabilities = Vec::with_capacity(ds.len());
    let mut truth = Vec::with_capacity(ds.len());
    let result = for_each_batch(ds, &cfg, 0, |b| {
        let p = model.forward(&b.x)?;
        let (loss, _) = categorical_crossentropy(&p, &b.y)?;
        loss_sum += loss * b.indices.len() as f64;
        predictions.extend(argmax_rows(&p));
        probabilities.extend(p.data().chunks(2).map(|r| [r[0], r[1]]));
        truth.extend(b.labels());
        Ok(())
    });
    model.set_mode(prev);
    result?;
    let confusion = metrics::confusion(&predictions, &truth)?;
    Ok(Evaluation {
        report: metrics::report(&confusion)?,
        confusion,
        loss: loss_sum / ds.len() as f64,
        predictions,
        probabilities,
    })
}

/// Trains `model` with Adam on augmented batches, validating every epoch.
///
/// The plateau schedule and early stopping both monitor validation loss. When
/// the run ends, for whatever reason, the weights and batch-norm statistics of
/// the best validation epoch are restored and the model is left in evaluation
/// mode. `on_epoch` sees every record as soon as it is complete.
pub fn train<F>(
    model: &mut Model<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    if model.spec().image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "model expects {}px inputs but the config asks for {}px",
            model.spec().image_size,
            cfg.image_size
        )));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr0,
        ..AdamConfig::default()
    });
    let p = &cfg.plateau;
    let mut plateau = PlateauScheduler::new(cfg.lr0, p.patience, p.factor, p.min_delta, p.min_lr)?;
    let mut early = EarlyStopping::new(cfg.early_stop.patience);
    let batches = BatchConfig {
        batch_size: cfg.batch_size,
        image_size: cfg.image_size,
        shuffle: true,
        augment: cfg.augment.clone(),
        seed: cfg.seed,
        workers: cfg.workers,
    };
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        let lr = plateau.lr();
        adam.set_lr(lr);
        model.set_mode(Mode::Training);
        let mut step = 0;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for_each_batch(train_ds, &batches, epoch - 1, |b| {
            step += 1;
            model.reseed(rng::derive_seed(cfg.seed, &[purpose::DROPOUT, epoch as u64, step as u64]));
            let z = model.forward_logits(&b.x)?;
            let probs = softmax(&z)?;
            let (loss, dz) = categorical_crossentropy(&probs, &b.y)?;
            if !loss.is_finite() || !z.all_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            model.backward(&dz, Backprop::Full)?;
            adam.step(model.params_mut().into_iter().map(|(_, p)| p))?;
            loss_sum += loss * b.indices.len() as f64;
            correct += argmax_rows(&probs)
                .iter()
                .zip(b.labels())
                .filter(|(p, t)| **p == *t)
                .count();
            Ok(())
        })?;

        let val = evaluate(model, val_ds, cfg.batch_size, cfg.workers)?;
        if !val.loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: val.loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_ds.len() as f64,
            train_acc: correct as f64 / train_ds.len() as f64,
            val_loss: val.loss,
            val_acc: val.report.accuracy,
            lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} train_acc {:.4} val_loss {:.5} val_acc {:.4} lr {lr:e}",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        on_epoch(&record);
        history.records.push(record);

        plateau.update(val.loss);
        if early.update(epoch, val.loss, model) == StopDecision::Stop {
            history.stopped_epoch = Some(epoch);
            log::info!("early stopping after epoch {epoch}");
            break;
        }
    }
    early.restore(model)?;
    history.best_epoch = early.best_epoch;
    model.set_mode(Mode::Evaluation);
    Ok(history)
}
