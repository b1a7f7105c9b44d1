use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pointwise (or per-row, for softmax) output nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu { alpha: f64 },
    /// Normalizes each row (one time step) over its columns.
    Softmax,
}

impl Activation {
    /// Apply in place to a `rows × cols` block.
    pub(crate) fn forward<T: Scalar>(&self, z: &mut [T], cols: usize) {
        match *self {
            Activation::Linear => {}
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::LeakyRelu { alpha } => {
                let a = T::lit(alpha);
                z.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v *= a
                    }
                });
            }
            Activation::Softmax => {
                for row in z.chunks_mut(cols) {
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut s = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
    }

    /// Turn `dy` into the gradient w.r.t. the pre-activation, given the
    /// activation output `y`.
    pub(crate) fn backward<T: Scalar>(&self, y: &[T], dy: &mut [T], cols: usize) {
        match *self {
            Activation::Linear => {}
            Activation::Relu => {
                for (d, &o) in dy.iter_mut().zip(y) {
                    if o <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            Activation::LeakyRelu { alpha } => {
                let a = T::lit(alpha);
                for (d, &o) in dy.iter_mut().zip(y) {
                    if o < T::zero() {
                        *d *= a;
                    }
                }
            }
            Activation::Softmax => {
                for (drow, prow) in dy.chunks_mut(cols).zip(y.chunks(cols)) {
                    let dot: T = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - dot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let mut v = [0.0f64; 4];
        Activation::Softmax.forward(&mut v, 4);
        assert_eq!(v, [0.25; 4]);
        let mut v = [0.0f64, 2f64.ln()];
        Activation::Softmax.forward(&mut v, 2);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
        let mut v = [-2.0f64, 3.0];
        Activation::LeakyRelu { alpha: 0.3 }.forward(&mut v, 2);
        assert!((v[0] + 0.6).abs() < 1e-15);
        assert_eq!(v[1], 3.0);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut v = [1000.0f32, 1000.0, -1000.0];
        Activation::Softmax.forward(&mut v, 3);
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(v[0], v[1]);
    }
}
