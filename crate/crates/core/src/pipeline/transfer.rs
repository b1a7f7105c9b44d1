use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{score_sequences, StateScores, DEFAULT_TAUS_S};
use crate::nn::{fine_tune, train, Checkpoint, FineTuneOptions, ModelConfig};
use crate::rng;
use crate::simgen::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub seed: u64,
    /// Checkpoint trained on the source system.
    pub source: PathBuf,
    /// Simulator recipe for the target system.
    pub target: GenConfig,
    pub folds: usize,
    pub train_per_fold: usize,
    /// Flights kept out of every fold for evaluation; at least this many.
    pub min_eval: usize,
    pub fine_tune: FineTuneOptions,
    /// From-scratch model; defaults to the source architecture trained for
    /// the same number of epochs as fine-tuning.
    pub scratch: Option<ModelConfig>,
    pub taus_s: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: PathBuf::from("results/checkpoints/hybrid.ckpt"),
            target: GenConfig {
                count: 40,
                ..GenConfig::variant_b()
            },
            folds: 5,
            train_per_fold: 5,
            min_eval: 10,
            fine_tune: FineTuneOptions::default(),
            scratch: None,
            taus_s: DEFAULT_TAUS_S.to_vec(),
            out_dir: PathBuf::from("results/transfer"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub fine_tuned: StateScores,
    pub scratch: StateScores,
    /// Every tensor outside the selected layers kept its exact bits.
    pub frozen_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub metric_names: Vec<String>,
    pub eval_ids: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_fine_tuned: Vec<f64>,
    pub mean_scratch: Vec<f64>,
}

impl TransferReport {
    fn mean_of(&self, pick: impl Fn(&FoldResult) -> &StateScores, name: &str) -> f64 {
        let i = self.metric_names.iter().position(|n| n == name).unwrap_or(0);
        self.folds.iter().map(|f| pick(f).metrics()[i]).sum::<f64>() / self.folds.len().max(1) as f64
    }

    pub fn mean_class_f1(&self) -> (f64, f64) {
        (
            self.mean_of(|f| &f.fine_tuned, "class_f1"),
            self.mean_of(|f| &f.scratch, "class_f1"),
        )
    }
}

fn frozen_identical(a: &Checkpoint<f32>, b: &Checkpoint<f32>, trainable: &[bool]) -> bool {
    let names = a.model.layer_names();
    a.model
        .tensor_info()
        .iter()
        .zip(a.model.tensors().iter().zip(b.model.tensors()))
        .filter(|(info, _)| !trainable[names.iter().position(|n| *n == info.layer).expect("known layer")])
        .all(|(_, (x, y))| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// For each fold, fine-tune the source model on a handful of target flights
/// and train the same architecture from scratch on those flights; score both
/// on a shared held-out set.
pub fn transfer_experiment(cfg: &TransferConfig) -> Result<TransferReport> {
    if cfg.folds < 3 {
        return Err(Error::invalid("transfer needs at least 3 folds"));
    }
    if cfg.train_per_fold == 0 {
        return Err(Error::invalid("each fold needs training flights"));
    }
    let source = Checkpoint::<f32>::load(&cfg.source)?;
    let data = crate::simgen::generate_dataset(&GenConfig {
        seed: rng::derive_seed(cfg.seed, "simgen-target", 0),
        ..cfg.target.clone()
    })?;
    let need = cfg.folds * cfg.train_per_fold + cfg.min_eval;
    if data.z() < need {
        return Err(Error::invalid(format!(
            "target set has {} flights, {} folds of {} plus {} held out need {need}",
            data.z(),
            cfg.folds,
            cfg.train_per_fold,
            cfg.min_eval
        )));
    }
    let mut order: Vec<usize> = (0..data.z()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "transfer", 0));
    let used = cfg.folds * cfg.train_per_fold;
    let mut eval_idx = order[used..].to_vec();
    eval_idx.sort_unstable();
    let eval = data.subset(&eval_idx);
    let truth: Vec<_> = eval.flights().iter().map(|f| f.labels()).collect();
    let trainable = cfg.fine_tune.selector.mask(source.model.layer_names())?;
    let scratch_cfg = cfg.scratch.clone().unwrap_or_else(|| ModelConfig {
        max_epochs: cfg.fine_tune.epochs,
        ..source.model.config().clone()
    });

    let mut folds = Vec::new();
    for k in 0..cfg.folds {
        let mut idx = order[k * cfg.train_per_fold..(k + 1) * cfg.train_per_fold].to_vec();
        idx.sort_unstable();
        let part = data.subset(&idx);
        let score = |ck: &Checkpoint<f32>| -> Result<StateScores> {
            let pred = ck.predict_dataset(&eval)?;
            score_sequences(&truth, &pred, ck.model.n_states(), eval.sample_period(), &cfg.taus_s)
        };
        let tuned = fine_tune(&source, &part, None, &cfg.fine_tune)?;
        let fresh = train::<f32>(
            &ModelConfig {
                seed: rng::derive_seed(cfg.seed, "scratch", k as u64),
                ..scratch_cfg.clone()
            },
            &part,
            None,
        )?;
        let r = FoldResult {
            fold: k,
            train_ids: part.flights().iter().map(|f| f.id.clone()).collect(),
            frozen_identical: frozen_identical(&source, &tuned, &trainable),
            fine_tuned: score(&tuned)?,
            scratch: score(&fresh)?,
        };
        log::info!(
            "fold {k}: fine-tuned class F1 {:.4}, scratch {:.4}",
            r.fine_tuned.classification.f1,
            r.scratch.classification.f1
        );
        folds.push(r);
    }
    let names = folds[0].fine_tuned.metric_names();
    let mean = |pick: fn(&FoldResult) -> &StateScores| -> Vec<f64> {
        (0..names.len())
            .map(|i| folds.iter().map(|f| pick(f).metrics()[i]).sum::<f64>() / folds.len() as f64)
            .collect()
    };
    Ok(TransferReport {
        mean_fine_tuned: mean(|f| &f.fine_tuned),
        mean_scratch: mean(|f| &f.scratch),
        metric_names: names,
        eval_ids: eval.flights().iter().map(|f| f.id.clone()).collect(),
        folds,
    })
}

/// `transfer.csv` (one row per fold and approach, then the means) and
/// `transfer.json`.
pub fn write_transfer(dir: &Path, r: &TransferReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("transfer.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head: Vec<String> = ["fold", "approach", "frozen_identical"].map(String::from).to_vec();
    head.extend(r.metric_names.iter().cloned());
    w.write_record(&head)?;
    for f in &r.folds {
        for (name, s) in [("fine_tuned", &f.fine_tuned), ("scratch", &f.scratch)] {
            let mut rec = vec![f.fold.to_string(), name.to_string(), f.frozen_identical.to_string()];
            rec.extend(s.metrics().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    for (name, m) in [("fine_tuned", &r.mean_fine_tuned), ("scratch", &r.mean_scratch)] {
        let mut rec = vec!["mean".to_string(), name.to_string(), String::new()];
        rec.extend(m.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("transfer.json");
    fs::write(&path, serde_json::to_string_pretty(r)? + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_config, Variant};

    fn source(dir: &Path) -> PathBuf {
        let ds = crate::simgen::generate_dataset(&GenConfig {
            count: 6,
            ..GenConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            n_states: 11,
            max_epochs: 1,
            ..tiny_config(Variant::Hybrid)
        };
        let path = dir.join("src.ckpt");
        train::<f32>(&cfg, &ds, None).unwrap().save(&path).unwrap();
        path
    }

    #[test]
    fn folds_keep_frozen_layers_and_report_means() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TransferConfig {
            source: source(dir.path()),
            target: GenConfig {
                count: 9,
                ..GenConfig::variant_b()
            },
            folds: 3,
            train_per_fold: 2,
            min_eval: 3,
            fine_tune: FineTuneOptions {
                epochs: 1,
                ..FineTuneOptions::default()
            },
            out_dir: dir.path().join("t"),
            ..TransferConfig::default()
        };
        let r = transfer_experiment(&cfg).unwrap();
        assert_eq!(r.folds.len(), 3);
        assert_eq!(r.eval_ids.len(), 3);
        assert!(r.folds.iter().all(|f| f.frozen_identical));
        let mut seen: Vec<&String> = r.folds.iter().flat_map(|f| &f.train_ids).chain(&r.eval_ids).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let m = r.mean_fine_tuned[r.metric_names.len() - 1];
        let direct = r.folds.iter().map(|f| f.fine_tuned.classification.f1).sum::<f64>() / 3.0;
        assert!((m - direct).abs() < 1e-12);
        write_transfer(&cfg.out_dir, &r).unwrap();
        assert!(cfg.out_dir.join("transfer.csv").exists());

        let short = TransferConfig {
            min_eval: 4,
            ..cfg
        };
        assert!(transfer_experiment(&short).is_err());
    }
}
