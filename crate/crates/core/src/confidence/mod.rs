//! Token confidence: correctness labels from edit-distance alignment, a
//! small residual classifier that smooths decoder probabilities, and
//! confidence-ranked data selection.

mod cem;
mod dump;
mod select;

use lhuc_autograd::Scalar;

pub use cem::{CemConfig, CemModel, TopKFeature};
pub use dump::{load_dump, read_dump, save_dump, write_dump};
pub use select::{select_top_percentile, utterance_confidence};

use crate::decoding::{align, EditOp, Hypothesis};

/// One label per hypothesis token: 1 when aligned to an equal reference
/// token, 0 for substitutions and insertions. Deletions carry no label.
pub fn align_labels<S: PartialEq>(hyp: &[S], reference: &[S]) -> Vec<u8> {
    align(hyp, reference)
        .into_iter()
        .filter_map(|op| match op {
            EditOp::Match => Some(1),
            EditOp::Substitution | EditOp::Insertion => Some(0),
            EditOp::Deletion => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRecord {
    pub utterance_id: String,
    pub token_index: usize,
    pub token_id: usize,
    /// Decoder softmax probability of the emitted token.
    pub raw_prob: f64,
    /// Last decoder layer state.
    pub hidden: Vec<f64>,
    pub top_probs: Vec<f64>,
    pub top_logits: Vec<f64>,
    pub smoothed: Option<f64>,
    pub label: Option<bool>,
}

impl ConfidenceRecord {
    /// Classifier input: hidden state followed by the chosen top-k block.
    pub fn features(&self, kind: TopKFeature) -> Vec<f64> {
        let top = match kind {
            TopKFeature::Probs => &self.top_probs,
            TopKFeature::Logits => &self.top_logits,
        };
        self.hidden.iter().chain(top).copied().collect()
    }
}

/// Records for every token of a hypothesis, labelled when a reference is
/// given.
pub fn hypothesis_records<T: Scalar>(utterance_id: &str, hyp: &Hypothesis<T>, reference: Option<&[usize]>) -> Vec<ConfidenceRecord> {
    let labels = reference.map(|r| align_labels(&hyp.tokens, r));
    hyp.token_info
        .iter()
        .enumerate()
        .map(|(i, t)| ConfidenceRecord {
            utterance_id: utterance_id.to_string(),
            token_index: i,
            token_id: t.token,
            raw_prob: t.prob().as_f64(),
            hidden: t.hidden.iter().map(|v| v.as_f64()).collect(),
            top_probs: t.top_probs.iter().map(|v| v.as_f64()).collect(),
            top_logits: t.top_logits.iter().map(|v| v.as_f64()).collect(),
            smoothed: None,
            label: labels.as_ref().map(|l| l[i] == 1),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_examples() {
        assert_eq!(align_labels(&['a', 'b', 'c'], &['a', 'b', 'c']), vec![1, 1, 1]);
        assert_eq!(align_labels(&['a', 'x', 'c'], &['a', 'b', 'c']), vec![1, 0, 1]);
        assert_eq!(align_labels(&['a', 'b', 'b', 'c'], &['a', 'b', 'c']), vec![1, 1, 0, 1]);
        assert_eq!(align_labels::<char>(&['a'], &[]), vec![0]);
    }

    /// Every minimal-cost alignment, as label vectors.
    fn all_minimal_labelings(h: &[u8], r: &[u8]) -> Vec<Vec<u8>> {
        fn go(h: &[u8], r: &[u8]) -> (usize, Vec<Vec<u8>>) {
            match (h.is_empty(), r.is_empty()) {
                (true, _) => (r.len(), vec![vec![]]),
                (false, true) => (h.len(), vec![vec![0; h.len()]]),
                _ => {
                    let mut opts = Vec::new();
                    let (c, ls) = go(&h[1..], &r[1..]);
                    let lab = u8::from(h[0] == r[0]);
                    opts.push((c + 1 - lab as usize, ls.into_iter().map(|mut l| { l.insert(0, lab); l }).collect::<Vec<_>>()));
                    let (c, ls) = go(&h[1..], r);
                    opts.push((c + 1, ls.into_iter().map(|mut l| { l.insert(0, 0); l }).collect()));
                    let (c, ls) = go(h, &r[1..]);
                    opts.push((c + 1, ls));
                    let best = opts.iter().map(|o| o.0).min().unwrap();
                    let mut all: Vec<Vec<u8>> = opts.into_iter().filter(|o| o.0 == best).flat_map(|o| o.1).collect();
                    all.sort();
                    all.dedup();
                    (best, all)
                }
            }
        }
        go(h, r).1
    }

    proptest! {
        #[test]
        fn labels_come_from_a_minimal_alignment(h in prop::collection::vec(0u8..3, 0..6), r in prop::collection::vec(0u8..3, 0..6)) {
            let labels = align_labels(&h, &r);
            prop_assert_eq!(labels.len(), h.len());
            let c = crate::decoding::edit_counts(&h, &r);
            prop_assert_eq!(labels.iter().filter(|&&l| l == 0).count(), c.substitutions + c.insertions);
            prop_assert!(all_minimal_labelings(&h, &r).contains(&labels));
        }
    }
}
