//! Mini-batch training with Adam on the dice loss, validation-driven early
//! stopping, and fine-tuning of selected layers.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::model::{argmax_rows, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::score_sequences;
use crate::rng;
use crate::scalar::Scalar;
use crate::trace::{Dataset, LabelSequence, NormStats};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss seen while training this epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_class_f1: Option<f64>,
    pub val_cpd_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Training-set loss before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (0 = initial weights).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "val_class_f1", "val_cpd_f1"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["0".into(), self.initial_train_loss.to_string(), String::new(), String::new(), String::new()])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                opt(e.val_loss),
                opt(e.val_class_f1),
                opt(e.val_cpd_f1),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Which layers a fine-tuning run may update.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    /// The two dense layers on top of the network.
    #[default]
    LastDense,
    /// Nothing trains; the output equals the input checkpoint.
    FreezeAll,
    /// Layer names; a trailing `*` matches by prefix (`gru*`). Every
    /// pattern must match at least one layer.
    Layers(Vec<String>),
}

impl LayerSelector {
    pub fn mask(&self, names: &[String]) -> Result<Vec<bool>> {
        let pats: Vec<String> = match self {
            LayerSelector::LastDense => vec!["dense_hidden".into(), "dense_out".into()],
            LayerSelector::FreezeAll => return Ok(vec![false; names.len()]),
            LayerSelector::Layers(p) => p.clone(),
        };
        if pats.is_empty() {
            return Err(Error::invalid("layer selector is empty"));
        }
        let hit = |p: &str, n: &str| match p.strip_suffix('*') {
            Some(prefix) => n.starts_with(prefix),
            None => n == p,
        };
        for p in &pats {
            if !names.iter().any(|n| hit(p, n)) {
                return Err(Error::invalid(format!("selector `{p}` matches no layer of {names:?}")));
            }
        }
        Ok(names.iter().map(|n| pats.iter().any(|p| hit(p, n))).collect())
    }
}

/// One flight as model input: normalized samples and its labels.
pub struct Prepared<T> {
    pub x: Vec<T>,
    pub y: Vec<usize>,
}

pub fn prepare<T: Scalar>(ds: &Dataset, norm: &NormStats) -> Vec<Prepared<T>> {
    let n = ds.schema().len();
    ds.flights()
        .iter()
        .map(|f| {
            let mut row = vec![0.0; n];
            let mut x = Vec::with_capacity(f.trace.samples().len());
            for t in 0..f.trace.len() {
                norm.apply_row(f.trace.row(t), &mut row);
                x.extend(row.iter().map(|&v| T::lit(v)));
            }
            Prepared {
                x,
                y: f.labels().labels().to_vec(),
            }
        })
        .collect()
}

fn batches<'a, T>(data: &'a [Prepared<T>], order: &[usize], size: usize) -> Vec<Vec<(&'a [T], &'a [usize])>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| (&data[i].x[..], &data[i].y[..])).collect())
        .collect()
}

/// Mean dice loss over fixed-order batches of `batch_size` flights.
pub fn dataset_loss<T: Scalar>(model: &Model<T>, data: &[Prepared<T>], batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let bs = batches(data, &order, batch_size);
    let mut total = 0.0;
    for b in &bs {
        total += model.loss(b)?.as_f64();
    }
    Ok(total / bs.len() as f64)
}

struct Validation<'a, T> {
    data: Vec<Prepared<T>>,
    truth: Vec<LabelSequence>,
    ds: &'a Dataset,
}

impl<T: Scalar> Validation<'_, T> {
    fn score(&self, model: &Model<T>, cfg: &ModelConfig) -> Result<(f64, f64, f64)> {
        let loss = dataset_loss(model, &self.data, cfg.batch_size)?;
        let pred = self
            .data
            .iter()
            .map(|p| Ok(LabelSequence::dense(argmax_rows(&model.forward(&p.x, p.y.len())?, cfg.n_states))))
            .collect::<Result<Vec<_>>>()?;
        let s = score_sequences(&self.truth, &pred, cfg.n_states, self.ds.sample_period(), &[cfg.val_tau_s])?;
        Ok((loss, s.classification.f1, s.cpd[0].report.f1))
    }
}

struct Fit {
    max_epochs: usize,
    patience: usize,
    learning_rate: f64,
    trainable: Vec<bool>,
}

/// The shared optimisation loop. Keeps the weights of the epoch with the
/// best validation classification F1 when a validation set is given.
fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    norm: &NormStats,
    opts: Fit,
) -> Result<History> {
    let cfg = model.config().clone();
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.catalog().len() != cfg.n_states {
        return Err(Error::Schema(format!(
            "dataset has {} states, model {}",
            train.catalog().len(),
            cfg.n_states
        )));
    }
    let data = prepare::<T>(train, norm);
    let val = val.filter(|v| !v.is_empty()).map(|ds| Validation {
        data: prepare::<T>(ds, norm),
        truth: ds.flights().iter().map(|f| f.labels()).collect(),
        ds,
    });

    let infos = model.tensor_info();
    let names: Vec<String> = infos.iter().map(|t| t.name.clone()).collect();
    let layer_names = model.layer_names().to_vec();
    let active: Vec<bool> = infos
        .iter()
        .map(|t| opts.trainable[layer_names.iter().position(|n| *n == t.layer).expect("known layer")])
        .collect();
    let first = opts.trainable.iter().position(|&m| m).unwrap_or(opts.trainable.len());

    let mut history = History {
        initial_train_loss: dataset_loss(model, &data, cfg.batch_size)?,
        ..History::default()
    };
    if first == opts.trainable.len() {
        return Ok(history);
    }
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::<T>::new(opts.learning_rate, &sizes);
    let mut best: Option<(f64, Vec<Vec<T>>)> = None;
    let mut since_best = 0;

    for epoch in 1..=opts.max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "batch", epoch as u64));
        let mut sum = 0.0;
        let bs = batches(&data, &order, cfg.batch_size);
        for (b, batch) in bs.iter().enumerate() {
            let (loss, grads) = model.loss_and_grads(batch, first)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                let ids: Vec<&str> = order.chunks(cfg.batch_size).nth(b).unwrap_or(&[]).iter().map(|&i| train.flights()[i].id.as_str()).collect();
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b} (flights {ids:?})")));
            }
            sum += loss;
            let mut params = model.tensors_mut();
            adam.step(&mut params, &grads, &active, &names)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: sum / bs.len() as f64,
            ..EpochRecord::default()
        };
        if let Some(v) = &val {
            let (loss, cf1, cpd) = v.score(model, &cfg)?;
            rec.val_loss = Some(loss);
            rec.val_class_f1 = Some(cf1);
            rec.val_cpd_f1 = Some(cpd);
            log::info!("epoch {epoch}: train {:.4} val {loss:.4} class F1 {cf1:.4} cpd F1 {cpd:.4}", rec.train_loss);
            if best.as_ref().is_none_or(|(f, _)| cf1 > *f) {
                best = Some((cf1, model.tensors().iter().map(|t| t.to_vec()).collect()));
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        } else {
            log::info!("epoch {epoch}: train {:.4}", rec.train_loss);
            history.best_epoch = epoch;
        }
        history.epochs.push(rec);
        if val.is_some() && since_best >= opts.patience {
            history.stopped_early = epoch < opts.max_epochs;
            break;
        }
    }
    if let Some((_, w)) = best {
        model.set_tensors(w)?;
    }
    Ok(history)
}

/// Train a fresh model. Normalization statistics come from `train`.
pub fn train<T: Scalar>(config: &ModelConfig, train: &Dataset, val: Option<&Dataset>) -> Result<Checkpoint<T>> {
    if let Some(v) = val {
        if v.schema() != train.schema() || v.catalog() != train.catalog() {
            return Err(Error::Schema("validation set differs in schema or catalog".into()));
        }
    }
    let norm = NormStats::fit(train)?;
    let mut model = Model::<T>::new(config, train.schema().len())?;
    let trainable = vec![true; model.layers().len()];
    let history = fit(
        &mut model,
        train,
        val,
        &norm,
        Fit {
            max_epochs: config.max_epochs,
            patience: config.patience,
            learning_rate: config.learning_rate,
            trainable,
        },
    )?;
    Ok(Checkpoint {
        model,
        norm,
        schema: Arc::clone(train.schema()),
        catalog: Arc::clone(train.catalog()),
        sample_period: train.sample_period(),
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneOptions {
    pub selector: LayerSelector,
    pub epochs: usize,
    /// Defaults to the checkpoint's learning rate.
    pub learning_rate: Option<f64>,
    pub patience: usize,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        Self {
            selector: LayerSelector::LastDense,
            epochs: 50,
            learning_rate: None,
            patience: 10,
        }
    }
}

/// Continue training the selected layers of `source` on new data. Frozen
/// tensors are left bit-identical; the source normalization is reused.
pub fn fine_tune<T: Scalar>(
    source: &Checkpoint<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    opts: &FineTuneOptions,
) -> Result<Checkpoint<T>> {
    for ds in std::iter::once(train).chain(val) {
        if **ds.schema() != *source.schema || ds.catalog().names() != source.catalog.names() {
            return Err(Error::Schema("fine-tuning data differs in schema or catalog".into()));
        }
    }
    let mut model = source.model.clone();
    let trainable = opts.selector.mask(model.layer_names())?;
    let history = fit(
        &mut model,
        train,
        val,
        &source.norm,
        Fit {
            max_epochs: opts.epochs,
            patience: opts.patience,
            learning_rate: opts.learning_rate.unwrap_or(source.model.config().learning_rate),
            trainable,
        },
    )?;
    Ok(Checkpoint {
        model,
        history,
        ..source.clone()
    })
}
