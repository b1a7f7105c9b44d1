//! Scoring: τ-tolerant change-point counts, per-class reports over time
//! steps, and Spearman rank correlation between channels.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::cpd::average_ranks;
use crate::error::{Error, Result};
use crate::trace::{extract_change_points, ChangePointAnnotation, Dataset, LabelSequence};

/// Default tolerances in seconds.
pub const DEFAULT_TAUS_S: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceMargin {
    pub seconds: f64,
    pub samples: usize,
}

impl ToleranceMargin {
    pub fn new(seconds: f64, sample_period: f64) -> Result<Self> {
        if !(seconds.is_finite() && seconds > 0.0 && sample_period > 0.0) {
            return Err(Error::invalid(format!("tolerance {seconds} s must be positive")));
        }
        let samples = (seconds / sample_period).round() as usize;
        if samples == 0 {
            return Err(Error::invalid(format!(
                "tolerance {seconds} s is below one sample at {sample_period} s"
            )));
        }
        Ok(Self { seconds, samples })
    }

    pub fn from_samples(samples: usize, sample_period: f64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::invalid("tolerance must be at least one sample"));
        }
        Ok(Self {
            seconds: samples as f64 * sample_period,
            samples,
        })
    }
}

/// Raw confusion counts. Summing these across traces before deriving
/// rates gives the pooled score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    /// 2TP / (2TP + FP + FN), 0 when the denominator is 0.
    pub f1: f64,
}

impl From<Counts> for ScoreReport {
    fn from(c: Counts) -> Self {
        Self {
            counts: c,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        }
    }
}

/// Tolerance counts on change times. A predicted point is a TP if any true
/// point lies strictly within τ, otherwise an FP; a true point with no
/// predicted point within τ is an FN. No one-to-one matching.
pub fn cpd_counts(truth: &[usize], pred: &[usize], tau: ToleranceMargin) -> Counts {
    let near = |t: usize, set: &[usize]| set.iter().any(|&s| t.abs_diff(s) < tau.samples);
    let tp = pred.iter().filter(|&&p| near(p, truth)).count();
    let fn_ = truth.iter().filter(|&&t| !near(t, pred)).count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_,
    }
}

pub fn cpd_score(truth: &[usize], pred: &[usize], tau: ToleranceMargin) -> ScoreReport {
    cpd_counts(truth, pred, tau).into()
}

/// [`cpd_score`] on annotations; the initial `t = 0` entries are not changes
/// and are ignored.
pub fn cpd_score_annotations(
    truth: &ChangePointAnnotation,
    pred: &ChangePointAnnotation,
    tau: ToleranceMargin,
) -> ScoreReport {
    cpd_score(&truth.change_times(), &pred.change_times(), tau)
}

/// Diagnostic variant: each true point absorbs at most one prediction,
/// matched greedily by distance.
pub fn cpd_counts_matched(truth: &[usize], pred: &[usize], tau: ToleranceMargin) -> Counts {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &t) in truth.iter().enumerate() {
        for (j, &p) in pred.iter().enumerate() {
            let d = t.abs_diff(p);
            if d < tau.samples {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_t = vec![false; truth.len()];
    let mut used_p = vec![false; pred.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_t[i] && !used_p[j] {
            used_t[i] = true;
            used_p[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: truth.len() - tp,
    }
}

/// One-vs-rest step counts per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub per_class: Vec<Counts>,
    /// Steps carrying each class in the truth.
    pub support: Vec<usize>,
}

impl ClassCounts {
    pub fn new(n_states: usize) -> Self {
        Self {
            per_class: vec![Counts::default(); n_states],
            support: vec![0; n_states],
        }
    }

    /// Add one aligned pair of sequences; steps masked in either are skipped.
    pub fn add(&mut self, truth: &LabelSequence, pred: &LabelSequence) -> Result<()> {
        if truth.labels().len() != pred.labels().len() {
            return Err(Error::Shape(format!(
                "truth has {} steps, prediction {}",
                truth.labels().len(),
                pred.labels().len()
            )));
        }
        let n = self.per_class.len();
        let steps = truth
            .labels()
            .iter()
            .zip(pred.labels())
            .zip(truth.mask().iter().zip(pred.mask()))
            .filter(|(_, (a, b))| **a && **b);
        for ((&o, &p), _) in steps {
            if o >= n || p >= n {
                return Err(Error::invalid(format!("label {} outside {n} states", o.max(p))));
            }
            self.support[o] += 1;
            if o == p {
                self.per_class[o].tp += 1;
            } else {
                self.per_class[o].fn_ += 1;
                self.per_class[p].fp += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> ClassificationReport {
        let per_class: Vec<ScoreReport> = self.per_class.iter().map(|&c| c.into()).collect();
        let present: Vec<usize> = (0..per_class.len()).filter(|&c| self.support[c] > 0).collect();
        let mean = |f: fn(&ScoreReport) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|&c| f(&per_class[c])).sum::<f64>() / present.len() as f64
            }
        };
        ClassificationReport {
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            support: self.support.clone(),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ScoreReport>,
    pub support: Vec<usize>,
    /// Unweighted means over classes that occur in the truth.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn classification_report(
    truth: &LabelSequence,
    pred: &LabelSequence,
    n_states: usize,
) -> Result<ClassificationReport> {
    let mut c = ClassCounts::new(n_states);
    c.add(truth, pred)?;
    Ok(c.report())
}

/// Spearman correlation between every pair of channels over all samples
/// of all flights. A constant channel correlates 0 with everything else.
pub fn spearman_matrix(dataset: &Dataset) -> Vec<Vec<f64>> {
    let n = dataset.schema().len();
    let columns: Vec<Vec<f64>> = (0..n)
        .map(|c| dataset.flights().iter().flat_map(|f| f.trace.channel(c)).collect())
        .collect();
    let names: Vec<&str> = dataset.schema().names().collect();
    spearman_columns(&columns, &names)
}

fn spearman_columns(columns: &[Vec<f64>], names: &[&str]) -> Vec<Vec<f64>> {
    let n = columns.len();
    let centred: Vec<Option<Vec<f64>>> = columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            let r = average_ranks(col);
            let m = r.iter().sum::<f64>() / r.len().max(1) as f64;
            let r: Vec<f64> = r.into_iter().map(|v| v - m).collect();
            if r.iter().all(|v| *v == 0.0) {
                log::warn!("channel `{}` is constant; its rank correlations are set to 0", names[c]);
                None
            } else {
                Some(r)
            }
        })
        .collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in i + 1..n {
            if let (Some(a), Some(b)) = (&centred[i], &centred[j]) {
                let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let den = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
                out[i][j] = (num / den).clamp(-1.0, 1.0);
                out[j][i] = out[i][j];
            }
        }
    }
    out
}

/// Change-point score at one tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauScore {
    pub tau_s: f64,
    pub report: ScoreReport,
}

/// Everything reported for a set of predicted state sequences: the
/// classification report plus change-point scores at each tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateScores {
    pub classification: ClassificationReport,
    pub cpd: Vec<TauScore>,
}

impl StateScores {
    pub fn cpd_at(&self, tau_s: f64) -> Option<&ScoreReport> {
        self.cpd.iter().find(|t| t.tau_s == tau_s).map(|t| &t.report)
    }

    /// Column names matching [`StateScores::metrics`].
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .cpd
            .iter()
            .flat_map(|t| ["precision", "recall", "f1"].map(|m| format!("cpd_{m}_tau{}s", t.tau_s)))
            .collect();
        names.extend(["class_precision", "class_recall", "class_f1"].map(String::from));
        names
    }

    /// CPD P/R/F1 per tolerance, then classification P/R/F1.
    pub fn metrics(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .cpd
            .iter()
            .flat_map(|t| [t.report.precision, t.report.recall, t.report.f1])
            .collect();
        let c = &self.classification;
        v.extend([c.precision, c.recall, c.f1]);
        v
    }
}

/// Score predicted sequences against the truth. Counts are pooled over all
/// sequences; change points come from the state transitions of each
/// sequence's valid prefix.
pub fn score_sequences(
    truth: &[LabelSequence],
    pred: &[LabelSequence],
    n_states: usize,
    sample_period: f64,
    taus_s: &[f64],
) -> Result<StateScores> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} truths, {} predictions", truth.len(), pred.len())));
    }
    let taus = taus_s
        .iter()
        .map(|&s| ToleranceMargin::new(s, sample_period))
        .collect::<Result<Vec<_>>>()?;
    let mut classes = ClassCounts::new(n_states);
    let mut cpd = vec![Counts::default(); taus.len()];
    for (o, p) in truth.iter().zip(pred) {
        classes.add(o, p)?;
        let t_cp = extract_change_points(o)?.change_times();
        let p_cp = extract_change_points(p)?.change_times();
        for (acc, &tau) in cpd.iter_mut().zip(&taus) {
            *acc += cpd_counts(&t_cp, &p_cp, tau);
        }
    }
    Ok(StateScores {
        classification: classes.report(),
        cpd: taus_s
            .iter()
            .zip(cpd)
            .map(|(&tau_s, c)| TauScore { tau_s, report: c.into() })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tau(s: usize) -> ToleranceMargin {
        ToleranceMargin::from_samples(s, 0.2).unwrap()
    }

    #[test]
    fn worked_examples() {
        let r = cpd_score(&[100, 200], &[103, 300], tau(5));
        assert_eq!(r.counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let r = cpd_score(&[100, 200], &[100, 200], tau(5));
        assert_eq!((r.counts.fp, r.counts.fn_, r.precision, r.recall, r.f1), (0, 0, 1.0, 1.0, 1.0));
        let r = cpd_score(&[100, 200], &[103, 300], tau(1));
        assert_eq!(r.counts, Counts { tp: 0, fp: 2, fn_: 2 });
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn boundary_is_strict() {
        assert_eq!(cpd_counts(&[10], &[15], tau(5)).tp, 0);
        assert_eq!(cpd_counts(&[10], &[14], tau(5)).tp, 1);
    }

    #[test]
    fn unmatched_asymmetry() {
        // two predictions near one truth are both TPs; matched variant keeps one
        let c = cpd_counts(&[50], &[48, 52], tau(5));
        assert_eq!(c, Counts { tp: 2, fp: 0, fn_: 0 });
        let m = cpd_counts_matched(&[50], &[48, 52], tau(5));
        assert_eq!(m, Counts { tp: 1, fp: 1, fn_: 0 });
        // one prediction between two truths covers both
        let c = cpd_counts(&[48, 52], &[50], tau(5));
        assert_eq!(c, Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn initial_entry_ignored() {
        let a = ChangePointAnnotation::from_pairs(&[(0, 0), (40, 1)]).unwrap();
        let b = ChangePointAnnotation::from_pairs(&[(0, 1), (41, 0)]).unwrap();
        let r = cpd_score_annotations(&a, &b, tau(5));
        assert_eq!(r.counts, Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn f1_grows_with_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t: Vec<usize> = (0..rng.random_range(0..8)).map(|_| rng.random_range(1..500)).collect();
            let p: Vec<usize> = (0..rng.random_range(0..8)).map(|_| rng.random_range(1..500)).collect();
            let mut prev: Option<ScoreReport> = None;
            for s in [1, 5, 15, 25, 60] {
                let r = cpd_score(&t, &p, tau(s));
                if let Some(q) = prev {
                    assert!(r.counts.tp >= q.counts.tp && r.counts.fp <= q.counts.fp);
                    assert!(r.counts.fn_ <= q.counts.fn_ && r.f1 >= q.f1);
                }
                prev = Some(r);
            }
        }
    }

    #[test]
    fn shifting_both_sets_changes_nothing() {
        let t = [30, 80, 81, 200];
        let p = [33, 90, 150];
        let a = cpd_score(&t, &p, tau(5));
        let sh = |v: &[usize]| v.iter().map(|x| x + 17).collect::<Vec<_>>();
        assert_eq!(a, cpd_score(&sh(&t), &sh(&p), tau(5)));
    }

    #[test]
    fn tolerance_conversion() {
        let t = ToleranceMargin::new(3.0, 0.2).unwrap();
        assert_eq!(t.samples, 15);
        assert!(ToleranceMargin::new(0.0, 0.2).is_err());
        assert!(ToleranceMargin::new(0.05, 0.2).is_err());
    }

    #[test]
    fn classification_example() {
        let o = LabelSequence::dense(vec![0, 0, 1, 1]);
        let p = LabelSequence::dense(vec![0, 1, 1, 1]);
        let r = classification_report(&o, &p, 3).unwrap();
        assert_eq!((r.per_class[0].precision, r.per_class[0].recall), (1.0, 0.5));
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        let perfect = classification_report(&o, &o, 3).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn classification_skips_masked_and_rejects_mismatch() {
        let o = LabelSequence::new(vec![0, 1, 2, 2], vec![true, true, false, false]).unwrap();
        let p = LabelSequence::dense(vec![0, 1, 0, 0]);
        let r = classification_report(&o, &p, 3).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.support, vec![1, 1, 0]);
        assert!(classification_report(&o, &LabelSequence::dense(vec![0]), 3).is_err());
    }

    #[test]
    fn macro_f1_ignores_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let o: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let p: Vec<usize> = o.iter().map(|&x| if rng.random_bool(0.3) { (x + 1) % 4 } else { x }).collect();
        let perm = [2, 0, 3, 1];
        let a = classification_report(&LabelSequence::dense(o.clone()), &LabelSequence::dense(p.clone()), 4).unwrap();
        let relabel = |v: &[usize]| LabelSequence::dense(v.iter().map(|&x| perm[x]).collect());
        let b = classification_report(&relabel(&o), &relabel(&p), 4).unwrap();
        assert!((a.f1 - b.f1).abs() < 1e-12);
    }

    #[test]
    fn spearman_properties() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 37) % 23) as f64).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let cube: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0).collect();
        let flat = vec![1.0; 50];
        let m = spearman_columns(&[x, neg, cube, flat], &["x", "neg", "cube", "flat"]);
        assert_eq!(m[0][0], 1.0);
        assert!((m[0][1] + 1.0).abs() < 1e-12);
        assert!((m[0][2] - 1.0).abs() < 1e-12);
        assert_eq!(m[0][3], 0.0);
        assert_eq!(m[3][3], 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn pooled_sequence_scores() {
        let truth = vec![
            LabelSequence::dense(vec![0, 0, 0, 1, 1, 1]),
            LabelSequence::dense(vec![2, 2, 1, 1]),
        ];
        let pred = vec![
            LabelSequence::dense(vec![0, 0, 1, 1, 1, 1]),
            LabelSequence::dense(vec![2, 2, 1, 1]),
        ];
        let s = score_sequences(&truth, &pred, 3, 1.0, &[1.0, 2.0]).unwrap();
        // change at 3 vs 2: outside τ=1, inside τ=2
        assert_eq!(s.cpd_at(1.0).unwrap().counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(s.cpd_at(2.0).unwrap().f1, 1.0);
        assert_eq!(s.metrics().len(), 9);
        assert_eq!(s.metric_names()[8], "class_f1");
        assert!(s.classification.f1 < 1.0);
        assert!(score_sequences(&truth, &pred[..1], 3, 1.0, &[1.0]).is_err());
    }
}
