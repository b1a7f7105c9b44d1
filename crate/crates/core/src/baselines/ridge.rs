use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::window::SampleMatrix;
use crate::error::{Error, Result};
use crate::scalar::matmul_at_b;

pub const DEFAULT_FOLDS: usize = 5;

/// `10^-6, 10^-5, …, 10^6`
pub fn default_alphas() -> Vec<f64> {
    (-6..=6).map(|k| 10f64.powi(k)).collect()
}

/// One-vs-all ridge regression on one-hot targets, intercept unpenalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeClassifier {
    pub alpha: f64,
    pub n_classes: usize,
    pub dim: usize,
    /// `dim × n_classes`
    pub weights: Vec<f64>,
    pub intercept: Vec<f64>,
}

/// Sufficient statistics of a sample set: `XᵀX`, `XᵀY`, column sums,
/// class counts.
#[derive(Clone)]
struct Moments {
    n: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    sx: Vec<f64>,
    sy: Vec<f64>,
}

impl Moments {
    fn of(m: &SampleMatrix, k: usize) -> Self {
        let d = m.dim;
        let mut xtx = vec![0.0; d * d];
        if m.rows() > 0 {
            matmul_at_b(&m.x, &m.x, &mut xtx, d, m.rows(), d, false);
        }
        let mut xty = vec![0.0; d * k];
        let mut sx = vec![0.0; d];
        let mut sy = vec![0.0; k];
        for (i, &c) in m.y.iter().enumerate() {
            let r = m.row(i);
            for j in 0..d {
                xty[j * k + c] += r[j];
                sx[j] += r[j];
            }
            sy[c] += 1.0;
        }
        Self {
            n: m.rows(),
            xtx,
            xty,
            sx,
            sy,
        }
    }

    fn minus(&self, o: &Moments) -> Moments {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Moments {
            n: self.n - o.n,
            xtx: sub(&self.xtx, &o.xtx),
            xty: sub(&self.xty, &o.xty),
            sx: sub(&self.sx, &o.sx),
            sy: sub(&self.sy, &o.sy),
        }
    }

    fn solve(&self, alpha: f64, k: usize) -> Result<RidgeClassifier> {
        let d = self.sx.len();
        let n = self.n as f64;
        let mx: Vec<f64> = self.sx.iter().map(|s| s / n).collect();
        let my: Vec<f64> = self.sy.iter().map(|s| s / n).collect();
        // centred Gram and cross moments
        let a = DMatrix::from_fn(d, d, |i, j| {
            self.xtx[i * d + j] - n * mx[i] * mx[j] + if i == j { alpha } else { 0.0 }
        });
        let b = DMatrix::from_fn(d, k, |i, c| self.xty[i * k + c] - n * mx[i] * my[c]);
        let w = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a
                .lu()
                .solve(&b)
                .ok_or_else(|| Error::NonFinite(format!("singular ridge system at alpha {alpha}")))?,
        };
        let mut weights = vec![0.0; d * k];
        for i in 0..d {
            for c in 0..k {
                weights[i * k + c] = w[(i, c)];
            }
        }
        let wx = DVector::from_column_slice(&mx).transpose() * &w;
        let intercept = (0..k).map(|c| my[c] - wx[c]).collect();
        Ok(RidgeClassifier {
            alpha,
            n_classes: k,
            dim: d,
            weights,
            intercept,
        })
    }
}

impl RidgeClassifier {
    /// Closed-form fit at one `alpha`.
    pub fn fit(m: &SampleMatrix, n_classes: usize, alpha: f64) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::invalid("ridge needs at least one sample"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("ridge alpha {alpha} must be positive")));
        }
        Moments::of(m, n_classes).solve(alpha, n_classes)
    }

    /// Choose `alpha` by `folds`-fold cross-validated accuracy over
    /// contiguous blocks of rows, then refit on everything. Ties go to the
    /// larger alpha.
    pub fn fit_cv(m: &SampleMatrix, n_classes: usize, alphas: &[f64], folds: usize) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("no ridge alphas given"));
        }
        if folds < 2 || m.rows() < folds {
            return Err(Error::invalid(format!("{} samples cannot fill {folds} folds", m.rows())));
        }
        let all = Moments::of(m, n_classes);
        let n = m.rows();
        let bounds: Vec<(usize, usize)> = (0..folds).map(|f| (f * n / folds, (f + 1) * n / folds)).collect();
        let mut correct = vec![0usize; alphas.len()];
        for &(lo, hi) in &bounds {
            let held = m.select(&(lo..hi).collect::<Vec<_>>());
            let train = all.minus(&Moments::of(&held, n_classes));
            for (ai, &alpha) in alphas.iter().enumerate() {
                let model = train.solve(alpha, n_classes)?;
                correct[ai] += (0..held.rows()).filter(|&i| model.predict(held.row(i)) == held.y[i]).count();
            }
        }
        let mut best = 0;
        for ai in 0..alphas.len() {
            if correct[ai] > correct[best] || (correct[ai] == correct[best] && alphas[ai] > alphas[best]) {
                best = ai;
            }
        }
        all.solve(alphas[best], n_classes)
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        let mut s = self.intercept.clone();
        for (j, &v) in x.iter().enumerate() {
            for c in 0..k {
                s[c] += v * self.weights[j * k + c];
            }
        }
        s
    }

    /// Highest-scoring class; ties go to the lowest id.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        (0..s.len()).fold(0, |b, c| if s[c] > s[b] { c } else { b })
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng;

    fn random(rows: usize, dim: usize, k: usize, seed: u64) -> SampleMatrix {
        let mut r = rng::stream(seed, "ridge-test", 0);
        let mut m = SampleMatrix::new(dim);
        for _ in 0..rows {
            let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            m.push(&x, r.random_range(0..k));
        }
        m
    }

    #[test]
    fn matches_augmented_normal_equations() {
        // oracle: solve [X 1]ᵀ[X 1] + diag(α,…,α,0) directly with LU
        for seed in 0..5 {
            let (rows, dim, k, alpha) = (40, 4, 3, 0.3);
            let m = random(rows, dim, k, seed);
            let fit = RidgeClassifier::fit(&m, k, alpha).unwrap();
            let xa = DMatrix::from_fn(rows, dim + 1, |i, j| if j < dim { m.row(i)[j] } else { 1.0 });
            let y = DMatrix::from_fn(rows, k, |i, c| (m.y[i] == c) as u8 as f64);
            let mut lhs = xa.transpose() * &xa;
            for j in 0..dim {
                lhs[(j, j)] += alpha;
            }
            let sol = lhs.lu().solve(&(xa.transpose() * y)).unwrap();
            for c in 0..k {
                for j in 0..dim {
                    assert!((sol[(j, c)] - fit.weights[j * k + c]).abs() < 1e-8);
                }
                assert!((sol[(dim, c)] - fit.intercept[c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn huge_alpha_predicts_the_majority() {
        let mut m = random(60, 3, 3, 9);
        m.y.iter_mut().take(40).for_each(|y| *y = 2);
        let fit = RidgeClassifier::fit(&m, 3, 1e6).unwrap();
        assert!(fit.weights.iter().all(|w| w.abs() < 1e-3));
        assert!((0..m.rows()).all(|i| fit.predict(m.row(i)) == 2));
    }

    #[test]
    fn separable_toy_is_fitted_exactly() {
        let mut m = SampleMatrix::new(2);
        for i in 0..20 {
            let v = i as f64 / 10.0;
            m.push(&[v + 0.1, -v], (i >= 10) as usize);
        }
        let fit = RidgeClassifier::fit(&m, 2, 1e-6).unwrap();
        assert!((0..20).all(|i| fit.predict(m.row(i)) == m.y[i]));
    }

    #[test]
    fn row_order_does_not_matter() {
        let m = random(30, 3, 2, 4);
        let rev: Vec<usize> = (0..30).rev().collect();
        let a = RidgeClassifier::fit(&m, 2, 0.5).unwrap();
        let b = RidgeClassifier::fit(&m.select(&rev), 2, 0.5).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_validation_picks_from_the_grid() {
        let m = random(50, 3, 2, 1);
        let fit = RidgeClassifier::fit_cv(&m, 2, &default_alphas(), DEFAULT_FOLDS).unwrap();
        assert!(default_alphas().contains(&fit.alpha));
        assert!(RidgeClassifier::fit_cv(&random(3, 2, 2, 0), 2, &default_alphas(), 5).is_err());
    }
}
