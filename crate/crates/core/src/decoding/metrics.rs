//! Edit-distance scoring and confidence-quality metrics.

use crate::error::{Error, Result};

/// Counts from one minimal-cost alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub correct: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.correct += o.correct;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// `cost[i][j]` = edit distance between `hyp[i..]` and `reference[j..]`.
pub(crate) fn suffix_costs<S: PartialEq>(hyp: &[S], reference: &[S]) -> Vec<Vec<usize>> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            d[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let sub = d[i + 1][j + 1] + usize::from(hyp[i] != reference[j]);
                sub.min(d[i + 1][j] + 1).min(d[i][j + 1] + 1)
            };
        }
    }
    d
}

/// Step of a minimal alignment, in hypothesis/reference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Substitution,
    Insertion,
    Deletion,
}

/// A minimal-cost alignment, walked from the start and preferring
/// match > substitution > insertion > deletion wherever several steps stay
/// on a minimal path.
pub fn align<S: PartialEq>(hyp: &[S], reference: &[S]) -> Vec<EditOp> {
    let d = suffix_costs(hyp, reference);
    let (n, m) = (hyp.len(), reference.len());
    let (mut i, mut j) = (0, 0);
    let mut ops = Vec::with_capacity(n.max(m));
    while i < n || j < m {
        let here = d[i][j];
        if i < n && j < m && hyp[i] == reference[j] && d[i + 1][j + 1] == here {
            ops.push(EditOp::Match);
            i += 1;
            j += 1;
        } else if i < n && j < m && hyp[i] != reference[j] && d[i + 1][j + 1] + 1 == here {
            ops.push(EditOp::Substitution);
            i += 1;
            j += 1;
        } else if i < n && d[i + 1][j] + 1 == here {
            ops.push(EditOp::Insertion);
            i += 1;
        } else {
            debug_assert!(j < m && d[i][j + 1] + 1 == here);
            ops.push(EditOp::Deletion);
            j += 1;
        }
    }
    ops
}

pub fn edit_counts<S: PartialEq>(hyp: &[S], reference: &[S]) -> EditCounts {
    let mut c = EditCounts::default();
    for op in align(hyp, reference) {
        match op {
            EditOp::Match => c.correct += 1,
            EditOp::Substitution => c.substitutions += 1,
            EditOp::Insertion => c.insertions += 1,
            EditOp::Deletion => c.deletions += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub counts: EditCounts,
    pub ref_len: usize,
}

/// Corpus WER: total errors over total reference length.
pub fn word_error_rate<S: PartialEq>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<WerReport> {
    if hyps.len() != refs.len() {
        return Err(Error::DimMismatch { expected: refs.len(), got: hyps.len() });
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    let mut counts = EditCounts::default();
    for (h, r) in hyps.iter().zip(refs) {
        counts.add(&edit_counts(h, r));
    }
    Ok(WerReport { wer: counts.errors() as f64 / ref_len as f64, counts, ref_len })
}

pub const ECE_BINS: usize = 10;

/// Equal-width 10-bin expected calibration error. A score of exactly 1 falls
/// in the top bin.
pub fn expected_calibration_error(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels pair up");
    if scores.is_empty() {
        return 0.0;
    }
    let mut n = [0usize; ECE_BINS];
    let mut conf = [0.0f64; ECE_BINS];
    let mut acc = [0.0f64; ECE_BINS];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1);
        n[b] += 1;
        conf[b] += s;
        acc[b] += f64::from(u8::from(l));
    }
    let total = scores.len() as f64;
    (0..ECE_BINS)
        .filter(|&b| n[b] > 0)
        .map(|b| (acc[b] - conf[b]).abs() / total)
        .sum()
}

/// ROC AUC by the rank-sum statistic with tied scores given their average
/// rank. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels pair up");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationReport {
    pub ece: f64,
    pub auc: Option<f64>,
}

pub fn calibration_metrics(scores: &[f64], labels: &[bool]) -> CalibrationReport {
    CalibrationReport { ece: expected_calibration_error(scores, labels), auc: auc(scores, labels) }
}
