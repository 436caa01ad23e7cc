use lhuc_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::ctc_prefix::{CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};
use crate::model::{ConformerModel, EncoderOutput, SpeakerParams, StepOutput};

/// Width of the top-k block in confidence features.
pub const TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Token budget as a multiple of encoder frames.
    pub max_len_ratio: f64,
    pub ctc_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 4, max_len_ratio: 1.0, ctc_weight: 0.3 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config("ctc_weight must lie in [0, 1]".into()));
        }
        if !(self.max_len_ratio > 0.0) {
            return Err(Error::Config("max_len_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Decoder-side evidence behind one emitted token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInfo<T> {
    pub token: usize,
    /// Attention log-probability of the token.
    pub log_prob: T,
    /// Last decoder layer state at the step that emitted the token.
    pub hidden: Vec<T>,
    /// Largest softmax probabilities at that step, descending, zero-padded.
    pub top_probs: Vec<T>,
    /// Pre-softmax outputs at the same indices as `top_probs`.
    pub top_logits: Vec<T>,
}

impl<T: Scalar> TokenInfo<T> {
    pub fn prob(&self) -> T {
        self.log_prob.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T> {
    pub tokens: Vec<usize>,
    /// Joint search score.
    pub score: T,
    /// Sum of attention log-probabilities, eos included once finished.
    pub att_score: T,
    /// CTC log-probability of exactly `tokens` (finished) or of the prefix.
    pub ctc_score: T,
    pub token_info: Vec<TokenInfo<T>>,
    pub eos_log_prob: Option<T>,
    pub finished: bool,
}

impl<T: Scalar> Hypothesis<T> {
    /// Mean attention probability of the emitted tokens; 0 for an empty
    /// hypothesis.
    pub fn mean_token_prob(&self) -> T {
        if self.token_info.is_empty() {
            return T::zero();
        }
        let s: T = self.token_info.iter().map(TokenInfo::prob).sum();
        s / T::lit(self.token_info.len() as f64)
    }
}

fn top_k<T: Scalar>(step: &StepOutput<T>) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..step.log_probs.len()).collect();
    idx.sort_by(|&a, &b| step.log_probs[b].partial_cmp(&step.log_probs[a]).expect("finite").then(a.cmp(&b)));
    let mut probs: Vec<T> = idx.iter().take(TOP_K).map(|&i| step.log_probs[i].exp()).collect();
    let mut logits: Vec<T> = idx.iter().take(TOP_K).map(|&i| step.logits[i]).collect();
    probs.resize(TOP_K, T::zero());
    logits.resize(TOP_K, T::zero());
    (probs, logits)
}

struct Beam<T> {
    hyp: Hypothesis<T>,
    ctc: Option<CtcPrefixState<T>>,
}

/// Maximum number of lexical tokens for an utterance with `frames`
/// encoder frames.
pub fn max_tokens(model: &ConformerModel<impl Scalar>, frames: usize, cfg: &DecodeConfig) -> usize {
    let by_ratio = ((cfg.max_len_ratio * frames as f64).floor() as usize).max(1);
    by_ratio.min(model.config.max_decode_len - 2)
}

/// Length-bounded beam search with optional CTC prefix-score interpolation.
/// Candidates are ranked by `(1 - w) * att + w * ctc`. Returns the best
/// finished hypothesis, or the best unfinished one flagged `finished = false`.
pub fn beam_search<T: Scalar>(model: &ConformerModel<T>, enc: &EncoderOutput<T>, cfg: &DecodeConfig) -> Result<Hypothesis<T>> {
    cfg.validate()?;
    let c = &model.config;
    let w = T::lit(cfg.ctc_weight);
    let ctc_lp;
    let scorer = if cfg.ctc_weight > 0.0 {
        ctc_lp = model.ctc_logits(enc)?;
        Some(CtcPrefixScorer::new(&ctc_lp, c.blank()))
    } else {
        None
    };
    let max_len = max_tokens(model, enc.frames, cfg);
    let root = Hypothesis {
        tokens: Vec::new(),
        score: T::zero(),
        att_score: T::zero(),
        ctc_score: T::zero(),
        token_info: Vec::new(),
        eos_log_prob: None,
        finished: false,
    };
    let mut running = vec![Beam { hyp: root, ctc: scorer.as_ref().map(CtcPrefixScorer::initial) }];
    let mut ended: Vec<Hypothesis<T>> = Vec::new();

    for depth in 0..=max_len {
        // (beam index, token, joint score, ctc state)
        let mut cands: Vec<(usize, usize, T, T, Option<CtcPrefixState<T>>)> = Vec::new();
        let mut steps = Vec::with_capacity(running.len());
        for (bi, b) in running.iter().enumerate() {
            let mut prefix = Vec::with_capacity(b.hyp.tokens.len() + 1);
            prefix.push(c.sos());
            prefix.extend_from_slice(&b.hyp.tokens);
            let step = model.decode_step(enc, &prefix)?;
            let allowed: Vec<usize> = if depth == max_len { vec![c.eos()] } else { c.lexical_tokens().chain([c.eos()]).collect() };
            for tok in allowed {
                let att = step.log_probs[tok];
                let (joint, ctc_score, state) = match (&scorer, &b.ctc) {
                    (Some(sc), Some(st)) => {
                        let (new_score, state) = if tok == c.eos() {
                            (sc.final_score(st), None)
                        } else {
                            let ns = sc.extend(st, tok);
                            (ns.prefix_score, Some(ns))
                        };
                        let delta = new_score - st.prefix_score;
                        (b.hyp.score + (T::one() - w) * att + w * delta, new_score, state)
                    }
                    _ => (b.hyp.score + att, T::zero(), None),
                };
                if joint.is_finite() {
                    cands.push((bi, tok, joint, ctc_score, state));
                }
            }
            steps.push(step);
        }
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores").then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.beam_size);

        let mut next = Vec::new();
        for (bi, tok, joint, ctc_score, state) in cands {
            let parent = &running[bi].hyp;
            let step = &steps[bi];
            let att = step.log_probs[tok];
            let mut hyp = parent.clone();
            hyp.score = joint;
            hyp.att_score = parent.att_score + att;
            hyp.ctc_score = ctc_score;
            if tok == c.eos() {
                hyp.eos_log_prob = Some(att);
                hyp.finished = true;
                ended.push(hyp);
            } else {
                let (top_probs, top_logits) = top_k(step);
                hyp.tokens.push(tok);
                hyp.token_info.push(TokenInfo { token: tok, log_prob: att, hidden: step.hidden.clone(), top_probs, top_logits });
                next.push(Beam { hyp, ctc: state });
            }
        }
        running = next;
        if running.is_empty() {
            break;
        }
        // Extensions only lower the attention score, so a finished hypothesis
        // at or above every running one cannot be overtaken.
        if cfg.ctc_weight == 0.0 {
            if let Some(best_end) = ended.iter().map(|h| h.score).fold(None, |m: Option<T>, s| Some(m.map_or(s, |m| m.max(s)))) {
                if running.iter().all(|b| b.hyp.score <= best_end) {
                    break;
                }
            }
        }
    }
    let pick = |v: Vec<Hypothesis<T>>| {
        v.into_iter().reduce(|best, h| if h.score > best.score { h } else { best })
    };
    if let Some(h) = pick(ended) {
        return Ok(h);
    }
    Ok(pick(running.into_iter().map(|b| b.hyp).collect()).expect("beam is never empty before the first step"))
}

/// Encode and decode one utterance; `speaker` of `None` means SI decoding.
pub fn decode_utterance<T: Scalar>(
    model: &ConformerModel<T>,
    features: &Tensor<T>,
    speaker: Option<&SpeakerParams<T>>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis<T>> {
    let enc = model.encode(features, speaker)?;
    beam_search(model, &enc, cfg)
}

/// Repeated argmax over lexical tokens and eos.
pub fn greedy_decode<T: Scalar>(model: &ConformerModel<T>, enc: &EncoderOutput<T>, max_len: usize) -> Result<Vec<usize>> {
    let c = &model.config;
    let mut prefix = vec![c.sos()];
    while prefix.len() <= max_len {
        let step = model.decode_step(enc, &prefix)?;
        let mut best = c.eos();
        for t in c.lexical_tokens() {
            if step.log_probs[t] > step.log_probs[best] || (step.log_probs[t] == step.log_probs[best] && t < best) {
                best = t;
            }
        }
        if best == c.eos() {
            break;
        }
        prefix.push(best);
    }
    Ok(prefix[1..].to_vec())
}
