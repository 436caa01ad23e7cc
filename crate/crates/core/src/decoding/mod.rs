//! Beam-search decoding and evaluation metrics.

mod beam;
mod ctc_prefix;
pub mod metrics;
mod output;

pub use beam::{beam_search, decode_utterance, greedy_decode, max_tokens, DecodeConfig, Hypothesis, TokenInfo, TOP_K};
pub use ctc_prefix::{CtcPrefixScorer, CtcPrefixState};
pub use metrics::{align, auc, calibration_metrics, edit_counts, expected_calibration_error, word_error_rate, CalibrationReport, EditCounts, EditOp, WerReport};
pub use output::{load_decodes, read_decodes, save_decodes, write_decodes, DecodeRecord, DECODE_HEADER};
pub(crate) use output::{join_tokens, parse_f64, parse_tokens};

#[cfg(test)]
mod tests;
