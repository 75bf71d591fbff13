//! Minibatch Adam training with per-sample gradients reduced in sample order.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AdamConfig, TrainConfig};
use crate::data::{Dataset, Sample, Split};
use crate::error::{CopaError, Result};
use crate::harness::evaluate::evaluate;
use crate::model::{CopaModel, LossParts};
use crate::params::{Graph, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig, n_params: usize) -> Self {
        Self {
            lr,
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One bias-corrected update for every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let lr = self.lr;
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Loss and parameter gradients for one sample under the model's current
/// trainable mask.
pub fn sample_gradients(model: &CopaModel, sample: &Sample, lambda: f64) -> Result<(LossParts, Vec<(ParamId, Array2<f64>)>)> {
    let mut g = Graph::new(&model.store, model.trainable_mask());
    let (loss, fwd, l_con) = model.loss_graph(&mut g, &sample.image, &sample.concept_labels, sample.disease_label, lambda)?;
    let total = g.tape.scalar(loss);
    let concept = g.tape.scalar(l_con);
    let logits = g.value(fwd.diagnosis.logits).row(0).to_owned();
    let diagnosis = crate::diagnosis::cross_entropy(&logits, sample.disease_label)?;
    let grads = g.param_grads(loss);
    Ok((
        LossParts {
            total,
            concept,
            diagnosis,
        },
        grads,
    ))
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: CopaModel,
    pub optimizer: Adam,
    pub lambda: f64,
    epoch: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(model: CopaModel, learning_rate: f64, adam: AdamConfig, lambda: f64) -> Result<Self> {
        crate::diagnosis::LossConfig::new(lambda)?;
        let n = model.store.len();
        Ok(Self {
            model,
            optimizer: Adam::new(learning_rate, adam, n),
            lambda,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on the mean loss of `batch`. Returns the mean loss
    /// parts.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(CopaError::invalid("batch", "empty batch"));
        }
        let model = &self.model;
        let lambda = self.lambda;
        let per_sample = batch
            .par_iter()
            .map(|s| sample_gradients(model, s, lambda))
            .collect::<Result<Vec<_>>>()?;

        let mut sum: Vec<Option<Array2<f64>>> = vec![None; model.store.len()];
        let mut mean = LossParts {
            total: 0.0,
            concept: 0.0,
            diagnosis: 0.0,
        };
        for (s, (parts, grads)) in batch.iter().zip(&per_sample) {
            if !parts.total.is_finite() {
                return Err(CopaError::NonFinite {
                    epoch: self.epoch,
                    step: self.steps,
                    detail: format!(
                        "sample {} loss {} (concept {}, diagnosis {})",
                        s.id, parts.total, parts.concept, parts.diagnosis
                    ),
                });
            }
            mean.total += parts.total;
            mean.concept += parts.concept;
            mean.diagnosis += parts.diagnosis;
            for (id, g) in grads {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(CopaError::NonFinite {
                        epoch: self.epoch,
                        step: self.steps,
                        detail: format!("sample {} gradient of {} is {bad}", s.id, model.store.get(*id).name),
                    });
                }
                match &mut sum[id.index()] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        mean.total *= scale;
        mean.concept *= scale;
        mean.diagnosis *= scale;
        let grads: Vec<(ParamId, Array2<f64>)> = self
            .model
            .store
            .ids()
            .zip(sum)
            .filter_map(|(id, g)| g.map(|g| (id, g * scale)))
            .collect();
        self.optimizer.update(&mut self.model.store, &grads);
        self.steps += 1;
        Ok(mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub concept_loss: f64,
    pub diagnosis_loss: f64,
    pub val_disease_acc: f64,
    pub val_concept_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Mean batch loss after every optimizer step.
    pub step_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_disease_acc: f64,
}

pub struct TrainOutcome {
    pub model: CopaModel,
    pub history: TrainHistory,
}

/// Trains from a fresh model on `split.train`, keeping the parameters of the
/// epoch with the best validation disease accuracy (earliest on ties).
pub fn train(config: &TrainConfig, dataset: &Dataset, split: &Split) -> Result<TrainOutcome> {
    config.validate()?;
    let model = CopaModel::new(config.model.clone(), dataset.schema.clone(), config.seed)?;
    let train_set: Vec<&Sample> = split.train.iter().map(|&i| &dataset.samples[i]).collect();
    let val_set: Vec<Sample> = split.val.iter().map(|&i| dataset.samples[i].clone()).collect();
    train_model(model, config, &train_set, &val_set)
}

pub fn train_model(model: CopaModel, config: &TrainConfig, train_set: &[&Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(CopaError::invalid("split.train", "training split is empty"));
    }
    let mut trainer = Trainer::new(model, config.learning_rate, config.adam, config.lambda)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x7a1e);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val_disease_acc: f64::NEG_INFINITY,
    };
    let mut best_store = trainer.model.store.clone();
    for epoch in 1..=config.epochs {
        trainer.epoch = epoch;
        order.shuffle(&mut rng);
        let (mut total, mut concept, mut diagnosis) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let parts = trainer.step(&batch)?;
            let w = batch.len() as f64;
            total += parts.total * w;
            concept += parts.concept * w;
            diagnosis += parts.diagnosis * w;
            history.step_losses.push(parts.total);
        }
        let n = train_set.len() as f64;
        let (val_disease_acc, val_concept_acc) = if val_set.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&trainer.model, val_set)?;
            (r.disease.acc, r.concept.acc)
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / n,
            concept_loss: concept / n,
            diagnosis_loss: diagnosis / n,
            val_disease_acc,
            val_concept_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (concept {:.4}, diagnosis {:.4}), val disease acc {:.3}, concept acc {:.3}",
            record.train_loss,
            record.concept_loss,
            record.diagnosis_loss,
            val_disease_acc,
            val_concept_acc
        );
        if val_disease_acc > history.best_val_disease_acc {
            history.best_val_disease_acc = val_disease_acc;
            history.best_epoch = epoch;
            best_store = trainer.model.store.clone();
        }
        history.epochs.push(record);
    }
    let mut model = trainer.model;
    model.store = best_store;
    Ok(TrainOutcome { model, history })
}
