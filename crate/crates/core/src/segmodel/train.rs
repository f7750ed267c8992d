//! Minibatch training and evaluation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SegDataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, Summary, DEFAULT_PERCENTILE};
use crate::numerics::{Rng, Tape, Tensor};
use crate::segmodel::checkpoint::{Checkpoint, CheckpointHeader};
use crate::segmodel::optim::{optimizers, Optimizer, OptimizerSettings};
use crate::segmodel::SegModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub optimizer_settings: OptimizerSettings,
    /// Sequential per-sample passes instead of the thread pool. Results are
    /// identical either way because gradients are reduced in sample order.
    pub deterministic: bool,
    pub percentile: f64,
    /// Images used for the data-dependent warm start.
    pub warmup_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.02,
            optimizer: "sgd".into(),
            optimizer_settings: OptimizerSettings::default(),
            deterministic: true,
            percentile: DEFAULT_PERCENTILE,
            warmup_samples: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::invalid(format!("percentile must be in [0, 100], got {}", self.percentile)));
        }
        optimizers().validate(&self.optimizer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc_mean: Option<f64>,
    pub val_hd_mean: Option<f64>,
    pub wall_seconds: f64,
}

/// Model plus everything needed to continue training exactly.
pub struct Trainer {
    pub model: SegModel,
    pub optimizer: Box<dyn Optimizer>,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
}

fn run_per_sample<T: Send>(
    deterministic: bool,
    items: &[usize],
    f: impl Fn(usize) -> Result<T> + Send + Sync,
) -> Result<Vec<T>> {
    if deterministic {
        items.iter().map(|&i| f(i)).collect()
    } else {
        items.par_iter().map(|&i| f(i)).collect()
    }
}

impl Trainer {
    /// Fresh model, warm-started on the first training images.
    pub fn new(model: SegModel, config: TrainConfig, mut rng: Rng, train: &SegDataset) -> Result<Self> {
        config.validate()?;
        check_compatible(&model, train)?;
        let mut model = model;
        let n = config.warmup_samples.clamp(1, train.len().max(1));
        let images: Vec<&Tensor> = train.samples.iter().take(n).map(|s| &s.image).collect();
        model.warm_start(&images, &mut rng)?;
        let optimizer = optimizers().create(&config.optimizer, &config.optimizer_settings)?;
        Ok(Self {
            model,
            optimizer,
            rng,
            epoch: 0,
            config,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config: TrainConfig = if ckpt.header.train.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_value(ckpt.header.train.clone())?
        };
        let model = model_from_checkpoint(&ckpt)?;
        let mut optimizer = optimizers().create(&ckpt.header.optimizer, &config.optimizer_settings)?;
        optimizer.load_state(ckpt.optimizer_state)?;
        Ok(Self {
            model,
            optimizer,
            rng: Rng::from_state(&ckpt.header.rng)?,
            epoch: ckpt.header.epoch,
            config,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                model: self.model.config.clone(),
                epoch: self.epoch,
                rng: self.rng.state(),
                optimizer: self.optimizer.name().to_string(),
                train: serde_json::to_value(&self.config)?,
            },
            params: self
                .model
                .params
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer_state: self.optimizer.state(),
        })
    }

    /// One optimizer step on the given samples; returns the mean loss.
    pub fn step(&mut self, data: &SegDataset, batch: &[usize], step_index: usize) -> Result<f64> {
        let model = &self.model;
        let results = run_per_sample(self.config.deterministic, batch, |i| {
            let s = &data.samples[i];
            let tape = Tape::new();
            let vars = model.params.bind(&tape);
            let loss = model.loss_on_tape(&tape, &vars, &s.image, &s.labels)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect::<Vec<_>>()))
        })
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Divergence {
                epoch: self.epoch + 1,
                step: step_index,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;

        let scale = 1.0 / batch.len() as f64;
        self.model.params.zero_grad();
        let mut total = 0.0;
        for (loss, grads) in &results {
            total += loss;
            for (p, g) in self.model.params.params_mut().iter_mut().zip(grads) {
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * v;
                }
            }
        }
        let mean = total * scale;
        let grads_finite = self.model.params.params().iter().all(|p| p.grad.is_finite());
        if !mean.is_finite() || !grads_finite {
            return Err(Error::Divergence {
                epoch: self.epoch + 1,
                step: step_index,
                detail: format!("loss {mean}, finite gradients: {grads_finite}"),
            });
        }
        self.optimizer.step(&mut self.model.params, self.config.lr);
        self.model.project_parameters();
        Ok(mean)
    }

    /// Runs one epoch over a reshuffled order and optionally validates.
    pub fn run_epoch(&mut self, train: &SegDataset, val: Option<&SegDataset>) -> Result<EpochRecord> {
        check_compatible(&self.model, train)?;
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for (k, batch) in order.chunks(self.config.batch_size).enumerate() {
            total += self.step(train, batch, k + 1)? * batch.len() as f64;
        }
        self.epoch += 1;
        let (val_dsc_mean, val_hd_mean) = match val {
            Some(v) => {
                let (summary, _) = evaluate(&self.model, v, self.config.percentile, self.config.deterministic)?;
                (Some(summary.mean_dsc), summary.mean_hd)
            }
            None => (None, None),
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            train_loss: total / train.len().max(1) as f64,
            val_dsc_mean,
            val_hd_mean,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains for `epochs` more epochs, reporting each record as it completes.
    pub fn train(
        &mut self,
        train: &SegDataset,
        val: Option<&SegDataset>,
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut log = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let rec = self.run_epoch(train, val)?;
            on_epoch(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<SegModel> {
    let mut model = SegModel::new(ckpt.header.model.clone(), &mut Rng::seeded(0))?;
    if ckpt.params.len() != model.params.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} parameter blocks, model needs {}",
            ckpt.params.len(),
            model.params.len()
        )));
    }
    for (name, value) in &ckpt.params {
        model
            .params
            .set_value(name, value.clone())
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    Ok(model)
}

pub fn check_compatible(model: &SegModel, data: &SegDataset) -> Result<()> {
    let (c, m) = (&model.config, &data.manifest);
    if (c.channels, c.height, c.width) != (m.channels, m.height, m.width) || m.classes > c.classes {
        return Err(Error::shape(
            "dataset",
            format!(
                "model expects {}×{}×{} with {} classes, data is {}×{}×{} with {}",
                c.channels, c.height, c.width, c.classes, m.channels, m.height, m.width, m.classes
            ),
        ));
    }
    Ok(())
}

/// Predictions and metrics for every sample, in sample order.
pub fn evaluate(model: &SegModel, data: &SegDataset, pct: f64, deterministic: bool) -> Result<(Summary, Vec<Vec<u8>>)> {
    check_compatible(model, data)?;
    let c = &model.config;
    let idx: Vec<usize> = (0..data.len()).collect();
    let rows = run_per_sample(deterministic, &idx, |i| {
        let s = &data.samples[i];
        let pred = model.predict(&s.image)?;
        let report = MetricReport::compute(&pred, &s.labels, c.height, c.width, c.classes, pct)?;
        Ok((report, pred))
    })?;
    let (reports, preds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((Summary::new(reports, c.classes), preds))
}
