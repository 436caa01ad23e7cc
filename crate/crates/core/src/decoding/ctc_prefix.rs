//! CTC prefix probabilities for joint attention/CTC beam search.

use lhuc_autograd::{Scalar, Tensor};

/// Forward variables of one prefix: log-probability that frames `0..=t`
/// emit exactly the prefix, ending in a non-blank (`r_n`) or blank (`r_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState<T> {
    pub r_n: Vec<T>,
    pub r_b: Vec<T>,
    /// `log` of the probability of every label sequence that starts with
    /// this prefix.
    pub prefix_score: T,
    last: Option<usize>,
}

/// Scores prefix extensions against fixed per-frame CTC log-probabilities.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer<'a, T> {
    log_probs: &'a Tensor<T>,
    blank: usize,
}

impl<'a, T: Scalar> CtcPrefixScorer<'a, T> {
    pub fn new(log_probs: &'a Tensor<T>, blank: usize) -> Self {
        Self { log_probs, blank }
    }

    fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    fn lp(&self, t: usize, k: usize) -> T {
        self.log_probs.data()[t * self.log_probs.shape()[1] + k]
    }

    /// State of the empty prefix: all-blank paths, score `log 1`.
    pub fn initial(&self) -> CtcPrefixState<T> {
        let n = self.frames();
        let mut r_b = Vec::with_capacity(n);
        let mut acc = T::zero();
        for t in 0..n {
            acc = acc + self.lp(t, self.blank);
            r_b.push(acc);
        }
        CtcPrefixState { r_n: vec![T::neg_infinity(); n], r_b, prefix_score: T::zero(), last: None }
    }

    /// Log-probability that the whole utterance emits exactly this prefix.
    pub fn final_score(&self, s: &CtcPrefixState<T>) -> T {
        let t = self.frames() - 1;
        T::log_add_exp(s.r_n[t], s.r_b[t])
    }

    /// State of `prefix + [c]`.
    pub fn extend(&self, s: &CtcPrefixState<T>, c: usize) -> CtcPrefixState<T> {
        let n = self.frames();
        let ninf = T::neg_infinity();
        let mut r_n = vec![ninf; n];
        let mut r_b = vec![ninf; n];
        // Paths may enter c only from a blank if c repeats the last label.
        let phi = |t: usize| if s.last == Some(c) { s.r_b[t] } else { T::log_add_exp(s.r_n[t], s.r_b[t]) };
        if s.last.is_none() {
            r_n[0] = self.lp(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..n {
            let p = phi(t - 1);
            r_n[t] = T::log_add_exp(r_n[t - 1], p) + self.lp(t, c);
            r_b[t] = T::log_add_exp(r_b[t - 1], r_n[t - 1]) + self.lp(t, self.blank);
            psi = T::log_add_exp(psi, p + self.lp(t, c));
        }
        CtcPrefixState { r_n, r_b, prefix_score: psi, last: Some(c) }
    }
}
