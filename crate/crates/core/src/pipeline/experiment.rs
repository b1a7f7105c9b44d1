use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::baselines::{fit_baseline, BaselineSpec, ClassifierSpec, WindowClassifier};
use crate::cpd::{detect_with_cost, CostKind, Method, SearchParams, Signal};
use crate::error::{Error, Result};
use crate::eval::{cpd_counts, score_sequences, Counts, ScoreReport, StateScores, ToleranceMargin};
use crate::nn::{train, Checkpoint, Variant};
use crate::rng::derive_seed;
use crate::trace::{normalize_channels, split_dataset, Dataset, LabelSequence, NormStats, SplitRecord};

pub const STAGES: [&str; 5] = ["split", "models", "cpd", "ml", "report"];

/// Training, validation and test partitions of one experiment.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub record: SplitRecord,
}

pub fn make_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = cfg.dataset()?;
    let (train, val, test, record) = split_dataset(&ds, cfg.split, derive_seed(cfg.seed, "split", 0))?;
    Ok(Splits {
        train,
        val,
        test,
        record,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdRow {
    pub method: Method,
    pub cost: CostKind,
    pub penalty: f64,
    pub scores: Vec<(f64, ScoreReport)>,
}

impl CpdRow {
    pub fn f1_at(&self, tau_s: f64) -> f64 {
        self.scores.iter().find(|(t, _)| *t == tau_s).map_or(0.0, |(_, r)| r.f1)
    }

    pub fn label(&self) -> String {
        format!("{} {} β={}", self.method, self.cost, self.penalty)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdTraceRow {
    pub flight: String,
    pub method: Method,
    pub cost: CostKind,
    pub penalty: f64,
    pub change_points: Vec<usize>,
    pub counts: Vec<Counts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdResults {
    pub rows: Vec<CpdRow>,
    pub traces: Vec<CpdTraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlRow {
    pub spec: BaselineSpec,
    /// Regularization chosen by cross-validation (ridge only).
    pub alpha: Option<f64>,
    pub scores: StateScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: Variant,
    pub params: usize,
    pub best_epoch: usize,
    pub scores: StateScores,
}

/// Reference model against the best baseline for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub model: f64,
    pub best_baseline: f64,
    pub baseline: String,
    /// `model / best_baseline − 1`; absent when the baseline scored 0.
    pub improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub reference: Variant,
    pub test_flights: usize,
    pub signal_scaling: String,
    pub comparisons: Vec<Comparison>,
    pub variant_class_f1: BTreeMap<String, f64>,
}

impl Summary {
    pub fn comparison(&self, metric: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.metric == metric)
    }
}

pub fn improvement(model: f64, best: f64) -> Option<f64> {
    (best > 0.0).then(|| model / best - 1.0)
}

/// What a call to [`run_experiment`] produced and which stages it ran.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub summary: Summary,
    pub variants: Vec<VariantScore>,
    pub cpd: CpdResults,
    pub ml: Vec<MlRow>,
    pub timings: BTreeMap<String, f64>,
}

#[derive(Default, Serialize, Deserialize)]
struct StageLog {
    fingerprint: String,
    done: Vec<String>,
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.into(),
        source: Box::new(e),
    })
}

fn checkpoint_path(dir: &Path, v: Variant) -> PathBuf {
    dir.join("checkpoints").join(format!("{}.ckpt", v.name()))
}

fn truth(ds: &Dataset) -> Vec<LabelSequence> {
    ds.flights().iter().map(|f| f.labels()).collect()
}

/// Change-point baselines on the z-scored test flights.
pub fn run_cpd(cfg: &ExperimentConfig, norm: &NormStats, test: &Dataset) -> Result<CpdResults> {
    let (scaled, _) = normalize_channels(test, Some(norm))?;
    let taus = cfg
        .taus_s
        .iter()
        .map(|&t| ToleranceMargin::new(t, test.sample_period()))
        .collect::<Result<Vec<_>>>()?;
    let g = &cfg.cpd;
    // per flight, per cost: fit once, run every method and penalty
    let per_flight: Vec<Vec<CpdTraceRow>> = scaled
        .flights()
        .par_iter()
        .map(|f| {
            let signal = Signal::from_trace(&f.trace);
            let truth = f.annotation.change_times();
            let mut rows = Vec::new();
            for &cost_kind in &g.costs {
                let cost = cost_kind.fit(&signal)?;
                for &method in &g.methods {
                    for &penalty in &g.penalties {
                        let params = SearchParams {
                            penalty,
                            min_size: g.min_size,
                            jump: g.jump,
                        };
                        let seg = detect_with_cost(cost.as_ref(), method, params)?;
                        let cps = seg.change_points().to_vec();
                        rows.push(CpdTraceRow {
                            flight: f.id.clone(),
                            method,
                            cost: cost_kind,
                            penalty,
                            counts: taus.iter().map(|&t| cpd_counts(&truth, &cps, t)).collect(),
                            change_points: cps,
                        });
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &cost in &g.costs {
        for &method in &g.methods {
            for &penalty in &g.penalties {
                let mut totals = vec![Counts::default(); taus.len()];
                for r in per_flight.iter().flatten() {
                    if r.cost == cost && r.method == method && r.penalty == penalty {
                        totals.iter_mut().zip(&r.counts).for_each(|(a, &c)| *a += c);
                    }
                }
                rows.push(CpdRow {
                    method,
                    cost,
                    penalty,
                    scores: cfg.taus_s.iter().zip(totals).map(|(&t, c)| (t, c.into())).collect(),
                });
            }
        }
    }
    Ok(CpdResults {
        rows,
        traces: per_flight.into_iter().flatten().collect(),
    })
}

/// Classical window classifiers, trained on `train` and scored on `test`.
pub fn run_ml(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<MlRow>> {
    let truth = truth(test);
    let opts = crate::baselines::BaselineOptions {
        seed: derive_seed(cfg.seed, "cart", 0),
        ..cfg.ml.options.clone()
    };
    cfg.ml
        .specs
        .par_iter()
        .map(|&spec| {
            let fitted = fit_baseline(spec, train, &opts)?;
            let pred = fitted.predict_dataset(test)?;
            let alpha = match &fitted.model {
                WindowClassifier::Ridge(r) => Some(r.alpha),
                WindowClassifier::Cart(_) => None,
            };
            Ok(MlRow {
                spec,
                alpha,
                scores: score_sequences(&truth, &pred, train.catalog().len(), test.sample_period(), &cfg.taus_s)?,
            })
        })
        .collect()
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `cpd_baseline.csv` (pooled per configuration) and
/// `cpd_baseline_traces.csv` (one row per flight and configuration).
pub fn write_cpd(dir: &Path, taus_s: &[f64], r: &CpdResults) -> Result<()> {
    let path = dir.join("cpd_baseline.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head: Vec<String> = ["method", "cost", "penalty"].map(String::from).to_vec();
    for t in taus_s {
        head.extend(["tp", "fp", "fn", "precision", "recall", "f1"].map(|m| format!("{m}_tau{t}s")));
    }
    w.write_record(&head)?;
    for row in &r.rows {
        let mut rec = vec![row.method.to_string(), row.cost.to_string(), row.penalty.to_string()];
        for (_, s) in &row.scores {
            rec.extend([
                s.counts.tp.to_string(),
                s.counts.fp.to_string(),
                s.counts.fn_.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
            ]);
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("cpd_baseline_traces.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head: Vec<String> = ["flight", "method", "cost", "penalty", "change_points"].map(String::from).to_vec();
    for t in taus_s {
        head.extend(["tp", "fp", "fn", "f1"].map(|m| format!("{m}_tau{t}s")));
    }
    w.write_record(&head)?;
    for row in &r.traces {
        let cps: Vec<String> = row.change_points.iter().map(|c| c.to_string()).collect();
        let mut rec = vec![
            row.flight.clone(),
            row.method.to_string(),
            row.cost.to_string(),
            row.penalty.to_string(),
            cps.join(" "),
        ];
        for c in &row.counts {
            let s = ScoreReport::from(*c);
            rec.extend([c.tp.to_string(), c.fp.to_string(), c.fn_.to_string(), s.f1.to_string()]);
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn write_ml(dir: &Path, rows: &[MlRow]) -> Result<()> {
    let path = dir.join("ml_baseline.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let mut head: Vec<String> = ["w", "classifier", "max_depth", "max_features", "alpha"].map(String::from).to_vec();
    head.extend(first.scores.metric_names());
    w.write_record(&head)?;
    for r in rows {
        let (depth, feats) = match r.spec.classifier {
            ClassifierSpec::Ridge => (String::new(), String::new()),
            ClassifierSpec::Cart {
                max_depth,
                max_features,
            } => (max_depth.map_or("none".into(), |d| d.to_string()), max_features.name().to_string()),
        };
        let mut rec = vec![r.spec.window.to_string(), r.spec.classifier.name().into(), depth, feats, fmt_opt(r.alpha)];
        rec.extend(r.scores.metrics().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn write_model_scores(dir: &Path, rows: &[VariantScore]) -> Result<()> {
    let path = dir.join("model_scores.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let mut head: Vec<String> = ["variant", "params", "best_epoch"].map(String::from).to_vec();
    head.extend(first.scores.metric_names());
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.variant.name().to_string(), r.params.to_string(), r.best_epoch.to_string()];
        rec.extend(r.scores.metrics().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// State bands per test flight: ground truth and each variant's prediction
/// as `[start, end)` runs of one state.
pub fn write_timeline(dir: &Path, test: &Dataset, preds: &[(Variant, Vec<LabelSequence>)]) -> Result<()> {
    let path = dir.join("timeline.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["flight", "source", "start", "end", "state"])?;
    let catalog = test.catalog();
    let mut emit = |flight: &str, source: &str, seq: &LabelSequence| -> Result<()> {
        let labels = seq.valid_labels();
        let mut start = 0;
        for t in 1..=labels.len() {
            if t == labels.len() || labels[t] != labels[start] {
                let name = catalog.name(labels[start]).unwrap_or("?");
                w.write_record([flight, source, &start.to_string(), &t.to_string(), name])?;
                start = t;
            }
        }
        Ok(())
    };
    for (i, f) in test.flights().iter().enumerate() {
        emit(&f.id, "truth", &f.labels())?;
        for (v, p) in preds {
            emit(&f.id, v.name(), &p[i])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn summarize(cfg: &ExperimentConfig, test: &Dataset, variants: &[VariantScore], cpd: &CpdResults, ml: &[MlRow]) -> Summary {
    let reference = &variants[0];
    let mut comparisons = Vec::new();
    for &tau in &cfg.taus_s {
        let best = cpd
            .rows
            .iter()
            .fold(None::<&CpdRow>, |b, r| if b.is_none_or(|b| r.f1_at(tau) > b.f1_at(tau)) { Some(r) } else { b });
        let model = reference.scores.cpd_at(tau).map_or(0.0, |r| r.f1);
        let (best_f1, label) = best.map_or((0.0, String::new()), |r| (r.f1_at(tau), r.label()));
        comparisons.push(Comparison {
            metric: format!("cpd_f1_tau{tau}s"),
            model,
            best_baseline: best_f1,
            baseline: label,
            improvement: improvement(model, best_f1),
        });
    }
    let best_ml = ml
        .iter()
        .fold(None::<&MlRow>, |b, r| if b.is_none_or(|b| r.scores.classification.f1 > b.scores.classification.f1) { Some(r) } else { b });
    let model = reference.scores.classification.f1;
    let (best_f1, label) = best_ml.map_or((0.0, String::new()), |r| (r.scores.classification.f1, r.spec.to_string()));
    comparisons.push(Comparison {
        metric: "class_f1".into(),
        model,
        best_baseline: best_f1,
        baseline: label,
        improvement: improvement(model, best_f1),
    });
    Summary {
        reference: reference.variant,
        test_flights: test.z(),
        signal_scaling: "change-point signals z-scored per channel with training-split statistics".into(),
        comparisons,
        variant_class_f1: variants.iter().map(|v| (v.variant.name().to_string(), v.scores.classification.f1)).collect(),
    }
}

/// Run every stage, skipping stages whose outputs from a run with the same
/// configuration are still on disk. The report stage re-runs whenever an
/// earlier stage did.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    let work = dir.join("stages");
    fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
    let log_path = dir.join("stages.json");
    let fingerprint = cfg.fingerprint()?;
    let mut log: StageLog = read_json(&log_path).unwrap_or_default();
    if log.fingerprint != fingerprint {
        log = StageLog {
            fingerprint,
            done: Vec::new(),
        };
    }
    write_json(&dir.join("config.json"), cfg)?;

    let outputs_exist = |name: &str| -> bool {
        let files: Vec<PathBuf> = match name {
            "split" => vec![dir.join("split.json")],
            "models" => cfg.variants.iter().map(|&v| checkpoint_path(&dir, v)).collect(),
            "cpd" => vec![dir.join("cpd_baseline.csv"), work.join("cpd.json")],
            "ml" => vec![dir.join("ml_baseline.csv"), work.join("ml.json")],
            _ => ["model_scores.csv", "summary.json", "timeline.csv"].iter().map(|f| dir.join(f)).collect(),
        };
        files.iter().all(|f| f.exists())
    };
    let mut ran: Vec<String> = Vec::new();
    let mut skipped = Vec::new();
    let mut timings = BTreeMap::new();
    let mut should_run = |name: &str, ran: &[String]| {
        let fresh = log.done.iter().any(|d| d == name) && outputs_exist(name) && (name != "report" || ran.is_empty());
        if fresh {
            skipped.push(name.to_string());
        }
        !fresh
    };

    let clock = Instant::now();
    let splits = stage("split", make_splits(cfg))?;
    let norm = stage("split", NormStats::fit(&splits.train))?;
    if should_run("split", &ran) {
        stage("split", write_json(&dir.join("split.json"), &splits.record))?;
        ran.push("split".into());
    }
    timings.insert("split".to_string(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    if should_run("models", &ran) {
        for &v in &cfg.variants {
            let ck = stage("models", train::<f32>(&cfg.model_for(v), &splits.train, Some(&splits.val)))?;
            let path = checkpoint_path(&dir, v);
            stage("models", ck.save(&path))?;
            stage("models", ck.history.write_csv(&path.with_extension("history.csv")))?;
        }
        ran.push("models".into());
    }
    timings.insert("models".to_string(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let cpd = if should_run("cpd", &ran) {
        let r = stage("cpd", run_cpd(cfg, &norm, &splits.test))?;
        stage("cpd", write_cpd(&dir, &cfg.taus_s, &r))?;
        stage("cpd", write_json(&work.join("cpd.json"), &r))?;
        ran.push("cpd".into());
        r
    } else {
        stage("cpd", read_json(&work.join("cpd.json")))?
    };
    timings.insert("cpd".to_string(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let ml = if should_run("ml", &ran) {
        let r = stage("ml", run_ml(cfg, &splits.train, &splits.test))?;
        stage("ml", write_ml(&dir, &r))?;
        stage("ml", write_json(&work.join("ml.json"), &r))?;
        ran.push("ml".into());
        r
    } else {
        stage("ml", read_json(&work.join("ml.json")))?
    };
    timings.insert("ml".to_string(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    type Preds = Vec<(Variant, Vec<LabelSequence>)>;
    let report = (|| -> Result<(Vec<VariantScore>, Summary, Preds)> {
        let truth = truth(&splits.test);
        let mut scores = Vec::new();
        let mut preds = Vec::new();
        for &v in &cfg.variants {
            let ck = Checkpoint::<f32>::load(&checkpoint_path(&dir, v))?;
            let p = ck.predict_dataset(&splits.test)?;
            scores.push(VariantScore {
                variant: v,
                params: ck.model.param_count(),
                best_epoch: ck.history.best_epoch,
                scores: score_sequences(&truth, &p, ck.model.n_states(), splits.test.sample_period(), &cfg.taus_s)?,
            });
            preds.push((v, p));
        }
        let summary = summarize(cfg, &splits.test, &scores, &cpd, &ml);
        Ok((scores, summary, preds))
    })();
    let (variants, summary, preds) = stage("report", report)?;
    if should_run("report", &ran) {
        stage("report", write_model_scores(&dir, &variants))?;
        stage("report", write_json(&dir.join("summary.json"), &summary))?;
        stage("report", write_timeline(&dir, &splits.test, &preds))?;
        ran.push("report".into());
    }
    timings.insert("report".to_string(), clock.elapsed().as_secs_f64());

    for s in &ran {
        if !log.done.contains(s) {
            log.done.push(s.clone());
        }
    }
    write_json(&log_path, &log)?;
    write_json(&dir.join("timings.json"), &timings)?;
    Ok(ExperimentOutcome {
        out_dir: dir,
        ran,
        skipped,
        summary,
        variants,
        cpd,
        ml,
        timings,
    })
}
