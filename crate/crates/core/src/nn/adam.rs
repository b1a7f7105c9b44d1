use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// One moment pair per parameter tensor, sized by `shapes`.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update of every tensor `i` with `active[i]`. A
    /// non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>], active: &[bool], names: &[String]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if !active[i] {
                continue;
            }
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` at element {k}", names[i])));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(self.lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let g = grads[i][k];
                m[k] = b1 * m[k] + ob1 * g;
                v[k] = b2 * v[k] + ob2 * g * g;
                p[k] -= step * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.5f64, -2.0];
        let mut opt = Adam::new(0.01, &[2]);
        opt.step(&mut [&mut p], &[vec![0.0, 0.0]], &[true], &names(1)).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0f64, 0.0];
        let mut opt = Adam::new(0.01, &[2]);
        opt.step(&mut [&mut p], &[vec![3.0, -0.002]], &[true], &names(1)).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn two_steps_match_scalar_trace() {
        let (lr, g) = (0.1, 0.5);
        let mut p = vec![1.0f64];
        let mut opt = Adam::new(lr, &[1]);
        let (mut m, mut v, mut want) = (0.0, 0.0, 1.0);
        for t in 1..=2 {
            opt.step(&mut [&mut p], &[vec![g]], &[true], &names(1)).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            want -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![1.0f32];
        let mut q = vec![2.0f32];
        let mut opt = Adam::new(0.1, &[1, 1]);
        let err = opt
            .step(&mut [&mut p, &mut q], &[vec![1.0], vec![f32::NAN]], &[true, true], &names(2))
            .unwrap_err();
        assert!(err.to_string().contains("p1"));
        assert_eq!((p[0], q[0]), (1.0, 2.0));
    }

    #[test]
    fn inactive_tensors_are_frozen() {
        let mut p = vec![1.0f64];
        let mut q = vec![2.0f64];
        let mut opt = Adam::new(0.1, &[1, 1]);
        opt.step(&mut [&mut p, &mut q], &[vec![1.0], vec![1.0]], &[false, true], &names(2)).unwrap();
        assert_eq!(p[0], 1.0);
        assert_ne!(q[0], 2.0);
    }
}
