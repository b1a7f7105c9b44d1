//! Sequence layers. Every layer maps a `len × in` row-major block to a
//! `len × out` block of the same length; gradients accumulate into caller
//! buffers laid out like the parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::act::Activation;
use crate::scalar::{matmul, matmul_a_bt, matmul_at_b, Scalar};

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect()
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
}

fn sum_rows_into<T: Scalar>(dz: &[T], out: &mut [T]) {
    for row in dz.chunks(out.len()) {
        out.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
    }
}

fn init_bound(fan_in: usize, act: Activation) -> f64 {
    let gain = match act {
        Activation::Relu | Activation::LeakyRelu { .. } => 6.0,
        Activation::Linear | Activation::Softmax => 3.0,
    };
    (gain / fan_in as f64).sqrt()
}

/// 1-D convolution, stride 1, zero "same" padding: output step `t` sees
/// inputs `t - (K-1)/2 ..= t + K/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub activation: Activation,
    /// `kernel × in_ch × out_ch`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kernel * in_ch;
        Self {
            in_ch,
            out_ch,
            kernel,
            activation,
            weight: uniform(rng, fan_in * out_ch, init_bound(fan_in, activation)),
            bias: vec![T::zero(); out_ch],
        }
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn im2col(&self, x: &[T], len: usize) -> Vec<T> {
        let (k, c) = (self.kernel, self.in_ch);
        let mut cols = vec![T::zero(); len * k * c];
        let pad = self.pad_left() as isize;
        for t in 0..len {
            for j in 0..k {
                let src = t as isize + j as isize - pad;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                cols[(t * k + j) * c..(t * k + j + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
            }
        }
        cols
    }

    pub fn forward(&self, x: &[T], len: usize) -> Vec<T> {
        let cols = self.im2col(x, len);
        let mut y = vec![T::zero(); len * self.out_ch];
        matmul(&cols, &self.weight, &mut y, len, self.kernel * self.in_ch, self.out_ch, false);
        add_bias(&mut y, &self.bias);
        self.activation.forward(&mut y, self.out_ch);
        y
    }

    /// `dy` is consumed as scratch. Returns `dx` when asked.
    pub fn backward(&self, x: &[T], y: &[T], mut dy: Vec<T>, len: usize, gw: &mut [T], gb: &mut [T], need_dx: bool) -> Option<Vec<T>> {
        self.activation.backward(y, &mut dy, self.out_ch);
        let kc = self.kernel * self.in_ch;
        let cols = self.im2col(x, len);
        matmul_at_b(&cols, &dy, gw, kc, len, self.out_ch, true);
        sum_rows_into(&dy, gb);
        if !need_dx {
            return None;
        }
        let mut dcols = cols;
        matmul_a_bt(&dy, &self.weight, &mut dcols, len, self.out_ch, kc, false);
        let c = self.in_ch;
        let pad = self.pad_left() as isize;
        let mut dx = vec![T::zero(); len * c];
        for t in 0..len {
            for j in 0..self.kernel {
                let src = t as isize + j as isize - pad;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                let from = &dcols[(t * self.kernel + j) * c..(t * self.kernel + j + 1) * c];
                dx[src * c..(src + 1) * c].iter_mut().zip(from).for_each(|(d, &g)| *d += g);
            }
        }
        Some(dx)
    }
}

/// Time-distributed affine map followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    /// `input × output`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input,
            output,
            activation,
            weight: uniform(rng, input * output, init_bound(input, activation)),
            bias: vec![T::zero(); output],
        }
    }

    pub fn forward(&self, x: &[T], len: usize) -> Vec<T> {
        let mut y = vec![T::zero(); len * self.output];
        matmul(x, &self.weight, &mut y, len, self.input, self.output, false);
        add_bias(&mut y, &self.bias);
        self.activation.forward(&mut y, self.output);
        y
    }

    pub fn backward(&self, x: &[T], y: &[T], mut dy: Vec<T>, len: usize, gw: &mut [T], gb: &mut [T], need_dx: bool) -> Option<Vec<T>> {
        self.activation.backward(y, &mut dy, self.output);
        matmul_at_b(x, &dy, gw, self.input, len, self.output, true);
        sum_rows_into(&dy, gb);
        need_dx.then(|| {
            let mut dx = vec![T::zero(); len * self.input];
            matmul_a_bt(&dy, &self.weight, &mut dx, len, self.output, self.input, false);
            dx
        })
    }
}

/// Gated recurrent unit, `h₀ = 0`, gates packed `[z | r | h̃]`:
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)
/// r = σ(x W_r + h U_r + b_r)
/// h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Gru<T> {
    pub input: usize,
    pub hidden: usize,
    /// `input × 3H`
    pub w: Vec<T>,
    /// `H × 3H`
    pub u: Vec<T>,
    pub b: Vec<T>,
}

/// Gate activations kept for the backward pass, each `len × H`.
#[derive(Clone, Debug)]
pub struct GruCache<T> {
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Gru<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            input,
            hidden,
            w: uniform(rng, input * 3 * hidden, bound),
            u: uniform(rng, hidden * 3 * hidden, bound),
            b: vec![T::zero(); 3 * hidden],
        }
    }

    pub fn forward(&self, x: &[T], len: usize) -> (Vec<T>, GruCache<T>) {
        let h3 = 3 * self.hidden;
        let hd = self.hidden;
        let mut xw = vec![T::zero(); len * h3];
        matmul(x, &self.w, &mut xw, len, self.input, h3, false);
        add_bias(&mut xw, &self.b);

        let mut hs = vec![T::zero(); len * hd];
        let mut cache = GruCache {
            z: vec![T::zero(); len * hd],
            r: vec![T::zero(); len * hd],
            n: vec![T::zero(); len * hd],
        };
        let mut prev = vec![T::zero(); hd];
        let mut acc = vec![T::zero(); h3];
        let mut rh = vec![T::zero(); hd];
        for t in 0..len {
            let a = &mut acc;
            a.copy_from_slice(&xw[t * h3..(t + 1) * h3]);
            // z, r pre-activations: + h U[:, ..2H]
            for (i, &hv) in prev.iter().enumerate() {
                if hv != T::zero() {
                    let row = &self.u[i * h3..i * h3 + 2 * hd];
                    a[..2 * hd].iter_mut().zip(row).for_each(|(s, &w)| *s += hv * w);
                }
            }
            let z = &mut cache.z[t * hd..(t + 1) * hd];
            let r = &mut cache.r[t * hd..(t + 1) * hd];
            for j in 0..hd {
                z[j] = sigmoid(a[j]);
                r[j] = sigmoid(a[hd + j]);
                rh[j] = r[j] * prev[j];
            }
            for (i, &v) in rh.iter().enumerate() {
                if v != T::zero() {
                    let row = &self.u[i * h3 + 2 * hd..(i + 1) * h3];
                    a[2 * hd..].iter_mut().zip(row).for_each(|(s, &w)| *s += v * w);
                }
            }
            let n = &mut cache.n[t * hd..(t + 1) * hd];
            let h = &mut hs[t * hd..(t + 1) * hd];
            for j in 0..hd {
                n[j] = a[2 * hd + j].tanh();
                h[j] = (T::one() - z[j]) * prev[j] + z[j] * n[j];
            }
            prev.copy_from_slice(h);
        }
        (hs, cache)
    }

    /// Backpropagation through time. `dh` holds the loss gradient w.r.t.
    /// every output `h_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[T],
        hs: &[T],
        cache: &GruCache<T>,
        dh: &[T],
        len: usize,
        gw: &mut [T],
        gu: &mut [T],
        gb: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let hd = self.hidden;
        let h3 = 3 * hd;
        let zero = vec![T::zero(); hd];
        let mut da = vec![T::zero(); len * h3];
        let mut carry = vec![T::zero(); hd];
        let mut dprev = vec![T::zero(); hd];
        let mut drh = vec![T::zero(); hd];
        for t in (0..len).rev() {
            let prev = if t == 0 { &zero[..] } else { &hs[(t - 1) * hd..t * hd] };
            let z = &cache.z[t * hd..(t + 1) * hd];
            let r = &cache.r[t * hd..(t + 1) * hd];
            let n = &cache.n[t * hd..(t + 1) * hd];
            let dat = &mut da[t * h3..(t + 1) * h3];
            for j in 0..hd {
                let g = dh[t * hd + j] + carry[j];
                let dn = g * z[j];
                let dz = g * (n[j] - prev[j]);
                dprev[j] = g * (T::one() - z[j]);
                dat[2 * hd + j] = dn * (T::one() - n[j] * n[j]);
                dat[j] = dz * z[j] * (T::one() - z[j]);
            }
            // through U: rows of U dotted with the gate gradients
            for i in 0..hd {
                let row = &self.u[i * h3..(i + 1) * h3];
                let mut s = T::zero();
                for j in 0..hd {
                    s += row[2 * hd + j] * dat[2 * hd + j];
                }
                drh[i] = s;
            }
            for j in 0..hd {
                let dr = drh[j] * prev[j];
                dprev[j] += drh[j] * r[j];
                dat[hd + j] = dr * r[j] * (T::one() - r[j]);
            }
            for i in 0..hd {
                let row = &self.u[i * h3..i * h3 + 2 * hd];
                let mut s = T::zero();
                for j in 0..2 * hd {
                    s += row[j] * dat[j];
                }
                dprev[i] += s;
            }
            std::mem::swap(&mut carry, &mut dprev);
        }

        matmul_at_b(x, &da, gw, self.input, len, h3, true);
        sum_rows_into(&da, gb);
        if len > 1 {
            // h_{t-1} for t = 1..len, paired with da rows 1..len
            let hp = &hs[..(len - 1) * hd];
            let da1 = &da[h3..];
            T::gemm(hd, len - 1, 2 * hd, T::one(), hp, 1, hd as isize, da1, h3 as isize, 1, T::one(), gu, h3 as isize, 1);
            let mut rh = vec![T::zero(); (len - 1) * hd];
            for t in 1..len {
                for j in 0..hd {
                    rh[(t - 1) * hd + j] = cache.r[t * hd + j] * hs[(t - 1) * hd + j];
                }
            }
            T::gemm(
                hd,
                len - 1,
                hd,
                T::one(),
                &rh,
                1,
                hd as isize,
                &da1[2 * hd..],
                h3 as isize,
                1,
                T::one(),
                &mut gu[2 * hd..],
                h3 as isize,
                1,
            );
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); len * self.input];
            matmul_a_bt(&da, &self.w, &mut dx, len, h3, self.input, false);
            dx
        })
    }
}
