//! Finite-difference oracle for every analytic gradient in the network.
//!
//! Derivatives are estimated with the fourth-order central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::act::Activation;
use super::layers::{Conv1d, Dense, Gru};
use super::loss::{dice_loss, DiceKind};
use super::model::{ConvSpec, Model, ModelConfig, Variant};
use crate::error::Result;
use crate::rng;

/// Step for model-level checks; kink crossings are detected and skipped.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Step for single-layer checks, small enough to stay clear of kinks.
const LAYER_STEP: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`].
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Numeric gradient of `f` at `x`.
pub fn numeric_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            let mut at = |d: f64| {
                x[i] = x0 + d;
                f(x)
            };
            let g = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            x[i] = x0;
            g
        })
        .collect()
}

/// Check gradients of `f` with respect to several independent slots, given
/// the analytic gradient for each.
fn check_slots(slots: &mut [Vec<f64>], analytic: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..slots.len() {
        let mut x = slots[i].clone();
        let numeric = numeric_gradient(&mut x, h, |v| {
            let saved = std::mem::replace(&mut slots[i], v.to_vec());
            let out = f(slots);
            slots[i] = saved;
            out
        });
        worst = worst.max(max_relative_error(&analytic[i], &numeric));
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conv layer under the scalar loss `Σ y ⊙ R`, checking input, weight and
/// bias gradients.
pub fn check_conv(in_ch: usize, out_ch: usize, kernel: usize, act: Activation, len: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck", 0);
    let mut layer = Conv1d::<f64>::new(in_ch, out_ch, kernel, act, &mut r);
    layer.bias = randn(&mut r, out_ch, 0.5);
    let x = randn(&mut r, len * in_ch, 1.0);
    let proj = randn(&mut r, len * out_ch, 1.0);
    let y = layer.forward(&x, len);
    let mut gw = vec![0.0; layer.weight.len()];
    let mut gb = vec![0.0; out_ch];
    let dx = layer
        .backward(&x, &y, proj.clone(), len, &mut gw, &mut gb, true)
        .expect("input gradient requested");
    let mut slots = vec![x, layer.weight.clone(), layer.bias.clone()];
    check_slots(&mut slots, &[dx, gw, gb], LAYER_STEP, |s| {
        let mut l = layer.clone();
        l.weight.clone_from(&s[1]);
        l.bias.clone_from(&s[2]);
        dot(&l.forward(&s[0], len), &proj)
    })
}

/// Time-distributed dense layer under `Σ y ⊙ R`.
pub fn check_dense(input: usize, output: usize, act: Activation, len: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck", 1);
    let mut layer = Dense::<f64>::new(input, output, act, &mut r);
    layer.bias = randn(&mut r, output, 0.5);
    let x = randn(&mut r, len * input, 1.0);
    let proj = randn(&mut r, len * output, 1.0);
    let y = layer.forward(&x, len);
    let mut gw = vec![0.0; layer.weight.len()];
    let mut gb = vec![0.0; output];
    let dx = layer
        .backward(&x, &y, proj.clone(), len, &mut gw, &mut gb, true)
        .expect("input gradient requested");
    let mut slots = vec![x, layer.weight.clone(), layer.bias.clone()];
    check_slots(&mut slots, &[dx, gw, gb], LAYER_STEP, |s| {
        let mut l = layer.clone();
        l.weight.clone_from(&s[1]);
        l.bias.clone_from(&s[2]);
        dot(&l.forward(&s[0], len), &proj)
    })
}

/// GRU under `Σ h ⊙ R`, checking BPTT through all `len` steps.
pub fn check_gru(input: usize, hidden: usize, len: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck", 2);
    let mut layer = Gru::<f64>::new(input, hidden, &mut r);
    layer.u = randn(&mut r, layer.u.len(), 0.8);
    layer.b = randn(&mut r, layer.b.len(), 0.5);
    let x = randn(&mut r, len * input, 1.0);
    let proj = randn(&mut r, len * hidden, 1.0);
    let (hs, cache) = layer.forward(&x, len);
    let mut gw = vec![0.0; layer.w.len()];
    let mut gu = vec![0.0; layer.u.len()];
    let mut gb = vec![0.0; layer.b.len()];
    let dx = layer
        .backward(&x, &hs, &cache, &proj, len, &mut gw, &mut gu, &mut gb, true)
        .expect("input gradient requested");
    let mut slots = vec![x, layer.w.clone(), layer.u.clone(), layer.b.clone()];
    check_slots(&mut slots, &[dx, gw, gu, gb], LAYER_STEP, |s| {
        let mut l = layer.clone();
        l.w.clone_from(&s[1]);
        l.u.clone_from(&s[2]);
        l.b.clone_from(&s[3]);
        dot(&l.forward(&s[0], len).0, &proj)
    })
}

/// Dice loss with respect to the probabilities of `batch` random sequences.
pub fn check_dice(kind: DiceKind, n_states: usize, lens: &[usize], seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck", 3);
    let mut slots: Vec<Vec<f64>> = lens
        .iter()
        .map(|&l| (0..l * n_states).map(|_| r.random_range(0.01..1.0)).collect())
        .collect();
    let labels: Vec<Vec<usize>> = lens
        .iter()
        .map(|&l| (0..l).map(|_| r.random_range(0..n_states)).collect())
        .collect();
    let lab: Vec<&[usize]> = labels.iter().map(|v| &v[..]).collect();
    let eval = |s: &[Vec<f64>]| {
        let p: Vec<&[f64]> = s.iter().map(|v| &v[..]).collect();
        dice_loss(&p, &lab, n_states, kind).expect("valid shapes")
    };
    let analytic = eval(&slots).1;
    check_slots(&mut slots, &analytic, LAYER_STEP, |s| eval(s).0)
}

/// Tiny network used by the model-level checks: 3 inputs, 4 states.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        conv_stack: vec![ConvSpec { filters: 4, kernel: 3 }, ConvSpec { filters: 4, kernel: 5 }],
        gru_stack: vec![5, 4],
        dense_hidden: 6,
        n_states: 4,
        ..ModelConfig::default()
    }
}

/// A deterministic random batch of `(inputs, labels)` for `model`.
pub fn random_batch(model: &Model<f64>, lens: &[usize], seed: u64) -> Vec<(Vec<f64>, Vec<usize>)> {
    let mut r = rng::stream(seed, "gradcheck", 4);
    lens.iter()
        .map(|&l| {
            let x = randn(&mut r, l * model.n_inputs(), 1.5);
            let y = (0..l).map(|t| (t * model.n_states() / l + r.random_range(0..2)) % model.n_states()).collect();
            (x, y)
        })
        .collect()
}

/// Outcome of a model-level gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Entries whose stencil crossed a rectifier kink. Finite differences
    /// are meaningless there, so they are left out of the error.
    pub kinked: Vec<bool>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        (0..self.analytic.len())
            .filter(|&i| !self.kinked[i])
            .map(|i| relative_error(self.analytic[i], self.numeric[i]))
            .fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.kinked.iter().filter(|&&k| k).count()
    }
}

/// Analytic and numeric dice-loss gradients for every parameter.
pub fn model_gradients(model: &Model<f64>, batch: &[(Vec<f64>, Vec<usize>)], h: f64) -> Result<GradCheck> {
    let refs: Vec<(&[f64], &[usize])> = batch.iter().map(|(x, y)| (&x[..], &y[..])).collect();
    let (_, grads) = model.loss_and_grads(&refs, 0)?;
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let base: Vec<Vec<f64>> = model.tensors().into_iter().map(|t| t.to_vec()).collect();
    let labels: Vec<&[usize]> = refs.iter().map(|b| b.1).collect();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut kinked = Vec::with_capacity(analytic.len());
    for (ti, tensor) in base.iter().enumerate() {
        for j in 0..tensor.len() {
            let mut eval = |d: f64| -> Result<(f64, Vec<bool>)> {
                probe.tensors_mut()[ti][j] = tensor[j] + d;
                let traces = refs
                    .iter()
                    .map(|(x, l)| probe.forward_trace(x, l.len()))
                    .collect::<Result<Vec<_>>>()?;
                let probs: Vec<&[f64]> = traces.iter().map(|t| t.probs()).collect();
                let loss = dice_loss(&probs, &labels, probe.n_states(), probe.config().loss)?.0;
                let pattern = traces.iter().flat_map(|t| probe.rectifier_pattern(t)).collect();
                Ok((loss, pattern))
            };
            let pts = [2.0, 1.0, -1.0, -2.0].map(|k| eval(k * h));
            probe.tensors_mut()[ti][j] = tensor[j];
            let [a, b, c, d] = pts;
            let (a, b, c, d) = (a?, b?, c?, d?);
            numeric.push((-a.0 + 8.0 * b.0 - 8.0 * c.0 + d.0) / (12.0 * h));
            kinked.push(a.1 != b.1 || b.1 != c.1 || c.1 != d.1);
        }
    }
    Ok(GradCheck {
        analytic,
        numeric,
        kinked,
    })
}

/// Max relative error between analytic and finite-difference gradients of
/// the model's loss on `batch`, over entries whose stencil stays on one
/// side of every rectifier kink.
pub fn gradient_check(model: &Model<f64>, batch: &[(Vec<f64>, Vec<usize>)], h: f64) -> Result<f64> {
    Ok(model_gradients(model, batch, h)?.max_relative_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-5;

    #[test]
    fn conv_gradients() {
        for (k, act) in [(1, Activation::Linear), (3, Activation::Relu), (4, Activation::LeakyRelu { alpha: 0.3 })] {
            let e = check_conv(3, 4, k, act, 12, 5);
            assert!(e < TOL, "kernel {k}: {e:e}");
        }
    }

    #[test]
    fn dense_gradients_all_activations() {
        for act in [
            Activation::Linear,
            Activation::Relu,
            Activation::LeakyRelu { alpha: 0.3 },
            Activation::Softmax,
        ] {
            let e = check_dense(5, 4, act, 12, 9);
            assert!(e < TOL, "{act:?}: {e:e}");
        }
    }

    #[test]
    fn gru_gradients() {
        let e = check_gru(3, 4, 12, 3);
        assert!(e < TOL, "{e:e}");
    }

    #[test]
    fn dice_gradients() {
        for kind in [DiceKind::Soft, DiceKind::Generalized] {
            let e = check_dice(kind, 4, &[12, 7], 2);
            assert!(e < TOL, "{kind:?}: {e:e}");
        }
    }

    #[test]
    fn model_gradients_each_variant() {
        for v in Variant::ALL {
            let m = Model::<f64>::new(&tiny_config(v), 3).unwrap();
            let batch = random_batch(&m, &[12, 9], 1);
            let g = model_gradients(&m, &batch, DEFAULT_STEP).unwrap();
            let e = g.max_relative_error();
            assert!(e < TOL, "{v:?}: {e:e}");
            assert!(g.skipped() * 10 < g.analytic.len(), "{v:?}: {} kinks", g.skipped());
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let m = Model::<f64>::new(&tiny_config(Variant::Hybrid), 3).unwrap();
        let batch = random_batch(&m, &[12, 12], 1);
        let mut g = model_gradients(&m, &batch, DEFAULT_STEP).unwrap();
        let i = g.kinked.iter().position(|&k| !k).unwrap();
        g.analytic[i] += 1.0;
        assert!(g.max_relative_error() > 1e-2);
    }
}
