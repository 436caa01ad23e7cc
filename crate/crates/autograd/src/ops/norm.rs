use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Variance floor inside batch normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Normalized statistics of one batch-norm call, for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

// dx = inv_std * (g - mean(g) - y * mean(g * y)), over `groups` of strided elements.
fn normalized_backward<T: Scalar>(
    y: &Tensor<T>,
    inv_std: &[T],
    g: &Tensor<T>,
    index: impl Fn(usize, usize) -> usize,
    groups: usize,
    group_len: usize,
) -> Tensor<T> {
    let n = T::lit(group_len as f64);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.len()];
    for grp in 0..groups {
        let mut mg = T::zero();
        let mut mgy = T::zero();
        for e in 0..group_len {
            let i = index(grp, e);
            mg = mg + gd[i];
            mgy = mgy + gd[i] * yd[i];
        }
        mg = mg / n;
        mgy = mgy / n;
        for e in 0..group_len {
            let i = index(grp, e);
            out[i] = inv_std[grp] * (gd[i] - mg - yd[i] * mgy);
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("norm grad")
}

pub(crate) fn layer_norm_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], g: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    normalized_backward(y, inv_std, g, |r, e| r * d + e, y.outer_len(), d)
}

pub(crate) fn batch_norm_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], g: &Tensor<T>) -> Tensor<T> {
    let c = y.last_dim();
    normalized_backward(y, inv_std, g, |col, e| e * c + col, c, y.outer_len())
}

impl<T: Scalar> Graph<T> {
    /// Normalizes each row (last axis) to zero mean, unit variance. No affine part.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 || xv.last_dim() == 0 {
            return Err(Error::ShapeMismatch { kind: "layer_norm", shapes: vec![xv.shape().to_vec()] });
        }
        let d = T::lit(xv.last_dim() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut data = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.outer_len());
        for row in xv.rows() {
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std })
    }

    /// Training-mode batch normalization of a `[n, c]` matrix over its rows.
    /// No affine part; returns the batch statistics alongside.
    pub fn batch_norm(&mut self, x: Var) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.shape()[0] == 0 {
            return Err(Error::ShapeMismatch { kind: "batch_norm", shapes: vec![xv.shape().to_vec()] });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let nf = T::lit(n as f64);
        let xd = xv.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for r in 0..n {
            for j in 0..c {
                mean[j] = mean[j] + xd[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        for r in 0..n {
            for j in 0..c {
                let d = xd[r * c + j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let eps = T::lit(BATCH_NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let data = (0..n * c).map(|i| (xd[i] - mean[i % c]) * inv_std[i % c]).collect();
        let out = Tensor::new(vec![n, c], data)?;
        let v = self.push("batch_norm", out, Op::BatchNorm { x, inv_std })?;
        Ok((v, BatchStats { mean, var }))
    }
}
