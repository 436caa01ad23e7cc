//! Optimizers: plain gradient descent for speaker parameters, Adam under a
//! Noam warm-up schedule for shared weights.

use lhuc_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// `x -= lr * g`.
pub fn sgd_step<T: Scalar>(x: &mut Tensor<T>, grad: &Tensor<T>, lr: T) {
    for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
        *v = *v - lr * g;
    }
}

/// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoamSchedule {
    pub factor: f64,
    pub warmup: usize,
    pub d_model: usize,
}

impl Default for NoamSchedule {
    fn default() -> Self {
        Self { factor: 1.0, warmup: 200, d_model: 16 }
    }
}

impl NoamSchedule {
    /// Learning rate at 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.factor * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Moment buffers shaped like `params`. Betas follow the common
    /// Transformer recipe (0.9, 0.98).
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One bias-corrected update; parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_peaks_at_warmup() {
        let s = NoamSchedule { factor: 1.0, warmup: 100, d_model: 16 };
        assert!(s.lr(50) < s.lr(100));
        assert!(s.lr(200) < s.lr(100));
        assert!((s.lr(100) - 0.25 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![Tensor::vector(vec![3.0f64, -2.0])];
        let mut opt = Adam::new(&x);
        for _ in 0..2000 {
            let g = x[0].map(|v| 2.0 * v);
            opt.step(&mut x, &[Some(g)], 0.01);
        }
        assert!(x[0].data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let mut x = Tensor::vector(vec![1.0f64, 2.0]);
        sgd_step(&mut x, &Tensor::vector(vec![5.0, 5.0]), 0.0);
        assert_eq!(x.data(), &[1.0, 2.0]);
    }
}
