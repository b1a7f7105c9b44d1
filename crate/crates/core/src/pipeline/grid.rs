use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::make_splits;
use crate::error::{Error, Result};
use crate::eval::{score_sequences, StateScores};
use crate::nn::{train, ConvSpec, ModelConfig};

pub const DEFAULT_GRID_CAP: usize = 64;

/// Hyper-parameter axes; every combination is one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelGrid {
    pub gru_cells: Vec<usize>,
    pub filters: Vec<usize>,
    pub conv_layers: Vec<usize>,
    /// First kernel size; later layers continue with the next multiples of 5.
    pub first_kernel: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for ModelGrid {
    fn default() -> Self {
        Self {
            gru_cells: vec![32, 48],
            filters: vec![16],
            conv_layers: vec![3],
            first_kernel: vec![3],
            learning_rates: vec![1e-3, 3e-3],
        }
    }
}

/// `[k0, next multiple of 5 above k0, +5, …]`, `n` long.
pub fn kernel_schedule(k0: usize, n: usize) -> Vec<usize> {
    let mut out = vec![k0];
    let mut k = (k0 / 5 + 1) * 5;
    while out.len() < n {
        out.push(k);
        k += 5;
    }
    out.truncate(n);
    out
}

impl ModelGrid {
    pub fn len(&self) -> usize {
        self.gru_cells.len() * self.filters.len() * self.conv_layers.len() * self.first_kernel.len() * self.learning_rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every configuration, derived from `base`, with a readable label.
    pub fn expand(&self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let mut out = Vec::new();
        for &layers in &self.conv_layers {
            for &k0 in &self.first_kernel {
                for &filters in &self.filters {
                    for &cells in &self.gru_cells {
                        for &lr in &self.learning_rates {
                            let cfg = ModelConfig {
                                conv_stack: kernel_schedule(k0, layers)
                                    .into_iter()
                                    .map(|kernel| ConvSpec { filters, kernel })
                                    .collect(),
                                gru_stack: vec![cells; base.gru_stack.len().max(1)],
                                learning_rate: lr,
                                ..base.clone()
                            };
                            let label = format!("layers={layers} k0={k0} filters={filters} gru={cells} lr={lr}");
                            out.push((label, cfg));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSearchConfig {
    pub experiment: ExperimentConfig,
    pub grid: ModelGrid,
    pub cap: usize,
    /// Permit grids larger than `cap`.
    pub allow_over_cap: bool,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            grid: ModelGrid::default(),
            cap: DEFAULT_GRID_CAP,
            allow_over_cap: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub label: String,
    pub is_default: bool,
    pub config: ModelConfig,
    /// Scores on the validation (tuning) split.
    pub scores: StateScores,
}

/// Train every configuration on the training split and rank them by
/// validation classification F1, then change-point F1 at 5 s, then label.
pub fn grid_search(cfg: &GridSearchConfig) -> Result<Vec<GridRow>> {
    let n = cfg.grid.len();
    if n == 0 {
        return Err(Error::invalid("grid is empty"));
    }
    if n > cfg.cap && !cfg.allow_over_cap {
        return Err(Error::invalid(format!(
            "grid has {n} configurations, over the cap of {}; allow it explicitly to proceed",
            cfg.cap
        )));
    }
    let exp = &cfg.experiment;
    let splits = make_splits(exp)?;
    let truth: Vec<_> = splits.val.flights().iter().map(|f| f.labels()).collect();
    let base = exp.model_for(exp.variants.first().copied().unwrap_or_default());
    let mut taus = exp.taus_s.clone();
    if !taus.contains(&5.0) {
        taus.push(5.0);
    }
    let mut rows: Vec<GridRow> = cfg
        .grid
        .expand(&base)
        .into_par_iter()
        .map(|(label, mc)| {
            let ck = train::<f32>(&mc, &splits.train, Some(&splits.val))?;
            let pred = ck.predict_dataset(&splits.val)?;
            let scores = score_sequences(&truth, &pred, mc.n_states, splits.val.sample_period(), &taus)?;
            Ok(GridRow {
                rank: 0,
                is_default: mc.conv_stack == base.conv_stack
                    && mc.gru_stack == base.gru_stack
                    && mc.learning_rate == base.learning_rate,
                label,
                config: mc,
                scores,
            })
        })
        .collect::<Result<_>>()?;
    rank_rows(&mut rows);
    Ok(rows)
}

fn rank_rows(rows: &mut [GridRow]) {
    let key = |r: &GridRow| (r.scores.classification.f1, r.scores.cpd_at(5.0).map_or(0.0, |s| s.f1));
    rows.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        kb.0.total_cmp(&ka.0).then(kb.1.total_cmp(&ka.1)).then_with(|| a.label.cmp(&b.label))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

/// `grid_search.csv` plus `grid_best.json` contrasting the best row with
/// the default configuration.
pub fn write_grid(dir: &Path, rows: &[GridRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("grid_search.csv");
    let mut w = csv::Writer::from_path(&path)?;
    if let Some(first) = rows.first() {
        let mut head: Vec<String> = ["rank", "config", "default"].map(String::from).to_vec();
        head.extend(first.scores.metric_names());
        w.write_record(&head)?;
    }
    for r in rows {
        let mut rec = vec![r.rank.to_string(), r.label.clone(), r.is_default.to_string()];
        rec.extend(r.scores.metrics().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let best = serde_json::json!({
        "best": rows.first().map(|r| (&r.label, r.scores.classification.f1)),
        "default": rows.iter().find(|r| r.is_default).map(|r| (&r.label, r.scores.classification.f1)),
    });
    let path = dir.join("grid_best.json");
    fs::write(&path, serde_json::to_string_pretty(&best)? + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ClassificationReport, ScoreReport, TauScore};

    #[test]
    fn kernels_grow_from_the_first() {
        assert_eq!(kernel_schedule(3, 5), [3, 5, 10, 15, 20]);
        assert_eq!(kernel_schedule(5, 3), [5, 10, 15]);
    }

    #[test]
    fn cardinality() {
        let g = ModelGrid {
            gru_cells: vec![8, 16],
            learning_rates: vec![1e-3, 3e-3],
            ..ModelGrid::default()
        };
        assert_eq!(g.expand(&ModelConfig::desk()).len(), 4);
    }

    fn row(label: &str, f1: f64, cpd: f64) -> GridRow {
        let r = ScoreReport {
            f1: cpd,
            ..ScoreReport::from(crate::eval::Counts::default())
        };
        GridRow {
            rank: 0,
            label: label.into(),
            is_default: false,
            config: ModelConfig::desk(),
            scores: StateScores {
                classification: ClassificationReport {
                    per_class: vec![],
                    support: vec![],
                    precision: 0.0,
                    recall: 0.0,
                    f1,
                },
                cpd: vec![TauScore { tau_s: 5.0, report: r }],
            },
        }
    }

    #[test]
    fn ties_break_on_cpd_then_label() {
        let mut rows = vec![row("b", 0.9, 0.5), row("a", 0.9, 0.5), row("c", 0.9, 0.7), row("d", 0.95, 0.0)];
        rank_rows(&mut rows);
        let order: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(order, ["d", "c", "a", "b"]);
        assert_eq!(rows[3].rank, 4);
    }

    #[test]
    fn two_by_two_grid_ranks_four_rows() {
        let dir = tempfile::tempdir().unwrap();
        let experiment = ExperimentConfig {
            seed: 1,
            dataset: crate::pipeline::DatasetSource::Simgen(crate::simgen::GenConfig {
                count: 10,
                ..Default::default()
            }),
            model: ModelConfig {
                conv_stack: kernel_schedule(3, 2).into_iter().map(|kernel| ConvSpec { filters: 4, kernel }).collect(),
                gru_stack: vec![6],
                dense_hidden: 6,
                max_epochs: 2,
                ..ModelConfig::desk()
            },
            ..ExperimentConfig::default()
        };
        let cfg = GridSearchConfig {
            experiment,
            grid: ModelGrid {
                gru_cells: vec![6, 8],
                filters: vec![4],
                conv_layers: vec![2],
                first_kernel: vec![3],
                learning_rates: vec![1e-3, 3e-3],
            },
            ..GridSearchConfig::default()
        };
        let rows = grid_search(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
        let default = rows.iter().find(|r| r.is_default).expect("grid contains the default");
        assert!(rows[0].scores.classification.f1 >= default.scores.classification.f1);
        write_grid(dir.path(), &rows).unwrap();
        let csv = fs::read_to_string(dir.path().join("grid_search.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("rank,config,default,cpd_precision_tau1s,"));
    }

    #[test]
    fn oversized_grid_needs_permission() {
        let cfg = GridSearchConfig {
            grid: ModelGrid {
                gru_cells: (1..=70).collect(),
                ..ModelGrid::default()
            },
            ..GridSearchConfig::default()
        };
        assert!(grid_search(&cfg).is_err());
    }
}
