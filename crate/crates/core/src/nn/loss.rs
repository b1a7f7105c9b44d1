use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceKind {
    /// `1 − mean_c (2 I_c + ε) / (P_c + G_c + ε)`
    #[default]
    Soft,
    /// Class-weighted form with `w_c = 1 / (G_c² + ε)`.
    Generalized,
}

/// Dice loss over a set of sequences treated as one pool of steps.
///
/// `probs[i]` is `len_i × n_states`, `labels[i]` has `len_i` entries. Only
/// these valid steps enter the sums. Returns the loss and `∂loss/∂probs`.
pub fn dice_loss<T: Scalar>(
    probs: &[&[T]],
    labels: &[&[usize]],
    n_states: usize,
    kind: DiceKind,
) -> Result<(T, Vec<Vec<T>>)> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions, {} label rows", probs.len(), labels.len())));
    }
    let mut inter = vec![0.0f64; n_states];
    let mut psum = vec![0.0f64; n_states];
    let mut gsum = vec![0.0f64; n_states];
    let mut steps = 0usize;
    for (p, l) in probs.iter().zip(labels) {
        if p.len() != l.len() * n_states {
            return Err(Error::Shape(format!("{} probabilities for {} steps × {n_states}", p.len(), l.len())));
        }
        steps += l.len();
        for (row, &g) in p.chunks(n_states).zip(l.iter()) {
            if g >= n_states {
                return Err(Error::invalid(format!("label {g} outside {n_states} states")));
            }
            for (c, &v) in row.iter().enumerate() {
                psum[c] += v.as_f64();
            }
            inter[g] += row[g].as_f64();
            gsum[g] += 1.0;
        }
    }
    if steps == 0 {
        return Err(Error::invalid("dice loss over zero valid steps"));
    }
    let eps = DICE_EPS;
    let ns = n_states as f64;
    // d loss / d p for g = 0 and g = 1, per class
    let (loss, d0, d1): (f64, Vec<f64>, Vec<f64>) = match kind {
        DiceKind::Soft => {
            let mut loss = 1.0;
            let mut d0 = vec![0.0; n_states];
            let mut d1 = vec![0.0; n_states];
            for c in 0..n_states {
                let den = psum[c] + gsum[c] + eps;
                let num = 2.0 * inter[c] + eps;
                loss -= num / den / ns;
                d0[c] = num / (den * den) / ns;
                d1[c] = -(2.0 * den - num) / (den * den) / ns;
            }
            (loss, d0, d1)
        }
        DiceKind::Generalized => {
            let w: Vec<f64> = gsum.iter().map(|g| 1.0 / (g * g + eps)).collect();
            let num = 2.0 * (0..n_states).map(|c| w[c] * inter[c]).sum::<f64>() + eps;
            let den = (0..n_states).map(|c| w[c] * (psum[c] + gsum[c])).sum::<f64>() + eps;
            let d0 = w.iter().map(|wc| num * wc / (den * den)).collect();
            let d1 = w.iter().map(|wc| -(2.0 * wc * den - num * wc) / (den * den)).collect();
            (1.0 - num / den, d0, d1)
        }
    };
    let grads = probs
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let mut g = vec![T::zero(); p.len()];
            for (row, &lab) in g.chunks_mut(n_states).zip(l.iter()) {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = T::lit(if c == lab { d1[c] } else { d0[c] });
                }
            }
            g
        })
        .collect();
    Ok((T::lit(loss), grads))
}
