//! Sliding-window classical classifiers: ridge (one-vs-all, cross-validated
//! regularization) and CART.
//!
//! A window of the last `w` normalized samples is flattened into one
//! feature vector and labeled with the state at its final step. The first
//! `w − 1` steps of a trace, which no window ends on, take the prediction
//! of the first full window.

mod cart;
mod ridge;
mod window;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cart::{DecisionTree, MaxFeatures, Node};
pub use ridge::{default_alphas, RidgeClassifier, DEFAULT_FOLDS};
pub use window::{append_windows, window_features, SampleMatrix, WindowedSample};

use crate::error::{Error, Result};
use crate::trace::{Dataset, LabelSequence, MultivariateTrace, NormStats, Schema};

/// Window widths matching the default convolution kernels.
pub const DEFAULT_WINDOWS: [usize; 5] = [3, 5, 10, 15, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierSpec {
    Ridge,
    Cart {
        max_depth: Option<usize>,
        max_features: MaxFeatures,
    },
}

impl ClassifierSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierSpec::Ridge => "ridge",
            ClassifierSpec::Cart { .. } => "cart",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub window: usize,
    pub classifier: ClassifierSpec,
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.classifier {
            ClassifierSpec::Ridge => write!(f, "ridge w={}", self.window),
            ClassifierSpec::Cart {
                max_depth,
                max_features,
            } => write!(
                f,
                "cart w={} depth={} features={}",
                self.window,
                max_depth.map_or("none".into(), |d| d.to_string()),
                max_features.name()
            ),
        }
    }
}

/// Ridge plus CART at depth ∈ {10, unbounded} × every feature cap, for
/// each window width.
pub fn default_grid() -> Vec<BaselineSpec> {
    let mut out = Vec::new();
    for window in DEFAULT_WINDOWS {
        out.push(BaselineSpec {
            window,
            classifier: ClassifierSpec::Ridge,
        });
        for max_depth in [Some(10), None] {
            for max_features in [MaxFeatures::All, MaxFeatures::Sqrt, MaxFeatures::Log2] {
                out.push(BaselineSpec {
                    window,
                    classifier: ClassifierSpec::Cart {
                        max_depth,
                        max_features,
                    },
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineOptions {
    /// Keep every `train_stride`-th training window.
    pub train_stride: usize,
    pub alphas: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            train_stride: 4,
            alphas: default_alphas(),
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WindowClassifier {
    Ridge(RidgeClassifier),
    Cart(DecisionTree),
}

impl WindowClassifier {
    pub fn predict(&self, x: &[f64]) -> usize {
        match self {
            WindowClassifier::Ridge(r) => r.predict(x),
            WindowClassifier::Cart(t) => t.predict(x),
        }
    }
}

/// A fitted baseline with the normalization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedBaseline {
    pub spec: BaselineSpec,
    pub norm: NormStats,
    pub schema: Schema,
    pub model: WindowClassifier,
}

fn normalized(trace: &MultivariateTrace, norm: &NormStats) -> Vec<f64> {
    let n = trace.n_channels();
    let mut out = vec![0.0; trace.samples().len()];
    for (src, dst) in trace.samples().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        norm.apply_row(src, dst);
    }
    out
}

/// Windowed, normalized training matrix for `train`.
pub fn training_matrix(train: &Dataset, norm: &NormStats, window: usize, stride: usize) -> Result<SampleMatrix> {
    let n = train.schema().len();
    let mut m = SampleMatrix::new(n * window);
    for f in train.flights() {
        append_windows(&mut m, &normalized(&f.trace, norm), n, f.labels().labels(), window, stride)?;
    }
    Ok(m)
}

/// Fit one baseline on `train`, with normalization fitted there too.
pub fn fit_baseline(spec: BaselineSpec, train: &Dataset, opts: &BaselineOptions) -> Result<FittedBaseline> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let norm = NormStats::fit(train)?;
    let m = training_matrix(train, &norm, spec.window, opts.train_stride)?;
    let k = train.catalog().len();
    let model = match spec.classifier {
        ClassifierSpec::Ridge => WindowClassifier::Ridge(RidgeClassifier::fit_cv(&m, k, &opts.alphas, opts.folds)?),
        ClassifierSpec::Cart {
            max_depth,
            max_features,
        } => WindowClassifier::Cart(DecisionTree::fit(&m, k, max_depth, max_features, opts.seed)?),
    };
    Ok(FittedBaseline {
        spec,
        norm,
        schema: (**train.schema()).clone(),
        model,
    })
}

impl FittedBaseline {
    /// One state per step of `trace`.
    pub fn predict_trace(&self, trace: &MultivariateTrace) -> Result<LabelSequence> {
        if **trace.schema() != self.schema {
            return Err(Error::Schema("trace schema differs from the training data".into()));
        }
        let w = self.spec.window;
        let len = trace.len();
        if w > len {
            return Err(Error::invalid(format!("window {w} does not fit a trace of {len} steps")));
        }
        let n = trace.n_channels();
        let x = normalized(trace, &self.norm);
        let mut labels: Vec<usize> = (w - 1..len).map(|t| self.model.predict(&x[(t + 1 - w) * n..(t + 1) * n])).collect();
        let head = vec![labels[0]; w - 1];
        labels.splice(0..0, head);
        Ok(LabelSequence::dense(labels))
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<LabelSequence>> {
        ds.flights().par_iter().map(|f| self.predict_trace(&f.trace)).collect()
    }
}
