//! Mini-batch training with Adam and the gradient-driven fusion update.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{compute_metrics, LabeledDataset, MetricsReport};
use crate::exec::Execution;
use crate::fusion::{FusionState, DEFAULT_DECAY};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::{seeded_rng, Error, Real, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds batch order. Model initialization uses the model config's seed.
    pub seed: u64,
    pub fusion_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            fusion_decay: DEFAULT_DECAY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.fusion_decay > 0.0 && self.fusion_decay < 1.0) {
            return Err(Error::Config(format!(
                "fusion decay {} must be in (0, 1)",
                self.fusion_decay
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

/// Predictions of a model over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub mean_loss: f64,
    pub metrics: MetricsReport,
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    fusion: &FusionState<T>,
    ds: &LabeledDataset<T>,
    exec: Execution,
) -> Result<Evaluation> {
    let k = model.config().num_classes;
    if ds.num_classes() != k {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {k}",
            ds.num_classes()
        )));
    }
    let logits = exec.try_map(ds.len(), |i| model.logits(&ds.images[i], fusion))?;
    let mut predictions = Vec::with_capacity(ds.len());
    let mut probabilities = Vec::with_capacity(ds.len());
    let mut loss = 0.0;
    for (l, &label) in logits.iter().zip(&ds.labels) {
        if !l.all_finite() {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        let l: Vec<f64> = l.data().iter().map(|v| v.as_f64()).collect();
        let p = softmax_f64(&l);
        loss -= p[label].max(f64::MIN_POSITIVE).ln();
        predictions.push(Tensor::<f64>::new(&[k], l)?.argmax());
        probabilities.push(p);
    }
    let metrics = compute_metrics(&ds.labels, &predictions, k)?;
    Ok(Evaluation {
        predictions,
        probabilities,
        mean_loss: if ds.is_empty() { 0.0 } else { loss / ds.len() as f64 },
        metrics,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub samples: usize,
}

/// Best-validation snapshot and full history of a run.
#[derive(Clone, Debug)]
pub struct FitSummary<T: Real = f32> {
    pub best_epoch: usize,
    pub best_model: Model<T>,
    pub best_fusion: FusionState<T>,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<T: Real = f32> {
    model: Model<T>,
    fusion: FusionState<T>,
    adam: Adam<T>,
    config: TrainConfig,
    exec: Execution,
    history: Vec<EpochRecord>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let fusion = model.fresh_fusion_state(config.fusion_decay)?;
        let adam = Adam::new(
            model.params(),
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            fusion,
            adam,
            config,
            exec,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn fusion(&self) -> &FusionState<T> {
        &self.fusion
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epochs_done(),
            history: self.history.clone(),
            ..CheckpointMeta::default()
        }
    }

    /// One optimizer step on the samples at `indices`, minimizing their mean
    /// cross-entropy. Per-sample gradients are summed in index order. The
    /// fusion EMA then absorbs the summed gradients at `F_wav` and `F_sa`.
    pub fn step(&mut self, ds: &LabeledDataset<T>, indices: &[usize]) -> Result<StepStats> {
        if indices.is_empty() {
            return Ok(StepStats::default());
        }
        let scale = T::one() / T::of_usize(indices.len());
        let (model, fusion) = (&self.model, &self.fusion);
        let results = self.exec.try_map(indices.len(), |k| {
            let i = indices[k];
            model.sample_gradients(&ds.images[i], ds.labels[i], fusion, scale)
        })?;

        let mut stats = StepStats::default();
        let mut g_wav: Option<Tensor<T>> = None;
        let mut g_sa: Option<Tensor<T>> = None;
        let accumulate = |acc: &mut Option<Tensor<T>>, g: &Option<Tensor<T>>| -> Result<()> {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.add_assign(g)?,
                    None => *acc = Some(g.clone()),
                }
            }
            Ok(())
        };
        self.model.params_mut().zero_grad();
        for (r, &i) in results.iter().zip(indices) {
            if !r.loss.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            stats.loss_sum += r.loss.as_f64();
            stats.correct += usize::from(r.logits.argmax() == ds.labels[i]);
            stats.samples += 1;
            for (p, g) in self.model.params_mut().iter_mut().zip(&r.params) {
                p.gradient.add_assign(g)?;
            }
            accumulate(&mut g_wav, &r.f_wav)?;
            accumulate(&mut g_sa, &r.f_sa)?;
        }
        self.adam.step(self.model.params_mut())?;
        if let (Some(gw), Some(gs)) = (g_wav, g_sa) {
            self.fusion.update(&gw, &gs)?;
        }
        Ok(stats)
    }

    /// Shuffles with a per-epoch stream, runs all batches (the last may be
    /// short), then evaluates on `val` if given.
    pub fn train_epoch(&mut self, train: &LabeledDataset<T>, val: Option<&LabeledDataset<T>>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.history.len() + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_rng(self.config.seed, &[0x7ea1, epoch as u64]));
        let mut total = StepStats::default();
        for batch in order.chunks(self.config.batch_size) {
            let s = self.step(train, batch)?;
            total.loss_sum += s.loss_sum;
            total.correct += s.correct;
            total.samples += s.samples;
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: total.loss_sum / total.samples as f64,
            train_accuracy: total.correct as f64 / total.samples as f64,
            ..EpochRecord::default()
        };
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let ev = evaluate(&self.model, &self.fusion, val, self.exec)?;
            rec.val_loss = Some(ev.mean_loss);
            rec.val_accuracy = Some(ev.metrics.accuracy);
            rec.val_macro_f1 = Some(ev.metrics.macro_f1);
        }
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs. The best snapshot is the one with the
    /// highest validation macro F1 (earliest on ties), or the last epoch
    /// without validation data. `on_epoch` sees each record and whether it
    /// is the new best.
    pub fn fit(
        &mut self,
        train: &LabeledDataset<T>,
        val: Option<&LabeledDataset<T>>,
        mut on_epoch: impl FnMut(&Self, &EpochRecord, bool) -> Result<()>,
    ) -> Result<FitSummary<T>> {
        let mut best: Option<(f64, usize, Model<T>, FusionState<T>)> = None;
        while self.epochs_done() < self.config.epochs {
            let rec = self.train_epoch(train, val)?;
            let score = rec.val_macro_f1.unwrap_or(f64::INFINITY);
            let improved = best.as_ref().is_none_or(|b| score > b.0 || score == f64::INFINITY);
            if improved {
                best = Some((score, rec.epoch, self.model.clone(), self.fusion.clone()));
            }
            on_epoch(self, &rec, improved)?;
        }
        let (_, best_epoch, best_model, best_fusion) = match best {
            Some(b) => b,
            None => (0.0, self.epochs_done(), self.model.clone(), self.fusion.clone()),
        };
        Ok(FitSummary {
            best_epoch,
            best_model,
            best_fusion,
            history: self.history.clone(),
        })
    }
}

pub const LOG_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// [`Trainer::fit`] that also writes one JSON line per epoch to
/// `metrics.jsonl`, and `last.ckpt` / `best.ckpt` into `out_dir`.
pub fn fit_to_dir<T: Real>(
    trainer: &mut Trainer<T>,
    train: &LabeledDataset<T>,
    val: Option<&LabeledDataset<T>>,
    out_dir: &Path,
) -> Result<FitSummary<T>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    trainer.fit(train, val, |t, rec, improved| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let meta = t.checkpoint_meta();
        save_checkpoint(&out_dir.join(LAST_CHECKPOINT), t.model(), t.fusion(), &meta)?;
        if improved {
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT), t.model(), t.fusion(), &meta)?;
        }
        Ok(())
    })
}
