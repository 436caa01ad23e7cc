//! CTC negative log-likelihood by the log-space forward-backward recursion.

use lhuc_autograd::{CustomBackward, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Minimum frame count for `target`: one per token plus a blank between
/// each adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct CtcRule<T> {
    /// d loss / d log_probs, already computed by the forward pass.
    grad: Tensor<T>,
}

impl<T: Scalar> CustomBackward<T> for CtcRule<T> {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let go = grad_output.data()[0];
        vec![Some(self.grad.map(|v| v * go))]
    }
}

/// Loss and its gradient w.r.t. the per-frame log-probabilities.
fn forward_backward<T: Scalar>(lp: &Tensor<T>, target: &[usize], blank: usize) -> Result<(T, Tensor<T>)> {
    let shape = lp.shape();
    if shape.len() != 2 {
        return Err(Error::DimMismatch { expected: 2, got: shape.len() });
    }
    let (frames, v) = (shape[0], shape[1]);
    if let Some(&t) = target.iter().find(|&&t| t == blank || t >= v) {
        return Err(Error::BadToken(t));
    }
    let needed = ctc_min_frames(target);
    if frames < needed || frames == 0 {
        return Err(Error::TargetTooLongForFrames { needed: needed.max(1), frames });
    }
    // Blank-augmented label sequence l' of length 2U + 1.
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let at = |t: usize, k: usize| lp.data()[t * v + k];
    // Skip transition s-2 -> s is allowed into a non-blank that differs from l'(s-2).
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = T::log_add_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = T::log_add_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + at(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 { T::log_add_exp(alpha[last + s_len - 1], alpha[last + s_len - 2]) } else { alpha[last] };
    if !log_p.is_finite() {
        return Err(Error::TargetTooLongForFrames { needed, frames });
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = at(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = at(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = T::log_add_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = T::log_add_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + at(t, ext[s]) };
        }
    }

    // d(-log p)/d lp[t,k] = -sum_{s: l'(s)=k} exp(alpha + beta - lp[t,k] - log p)
    let mut grad = vec![T::zero(); frames * v];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let k = ext[s];
            grad[t * v + k] = grad[t * v + k] - (ab - at(t, k) - log_p).exp();
        }
    }
    Ok((-log_p, Tensor::new(vec![frames, v], grad)?))
}

/// `-log sum over alignments` of `target` under per-frame log-probabilities
/// `log_probs[frames, vocab]`, differentiable w.r.t. `log_probs`.
pub fn ctc_loss<T: Scalar>(g: &mut Graph<T>, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (loss, grad) = forward_backward(g.value(log_probs), target, blank)?;
    Ok(g.custom(&[log_probs], Tensor::scalar(loss), Box::new(CtcRule { grad }))?)
}

/// Plain-value form of [`ctc_loss`].
pub fn ctc_loss_value<T: Scalar>(log_probs: &Tensor<T>, target: &[usize], blank: usize) -> Result<T> {
    Ok(forward_backward(log_probs, target, blank)?.0)
}
