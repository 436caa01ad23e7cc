use std::collections::BTreeMap;

use lhuc_autograd::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{bayes_adapt, estimate_lhuc};
use super::{derive_seed, AdaptConfig, AdaptLog, AdaptMode, AdaptUtterance, AdaptationSet, Source};
use crate::confidence::{hypothesis_records, utterance_confidence, CemModel};
use crate::corpus::corrupt_references;
use crate::decoding::{decode_utterance, edit_counts, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::model::checkpoint::SpeakerState;
use crate::model::ConformerModel;

/// How first-pass utterances are ranked for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Mean attention softmax probability of the emitted tokens.
    RawAtt,
    /// Per-symbol geometric mean of the joint attention and CTC score.
    AttCtc,
    /// Mean CEM-smoothed token confidence.
    Cem,
    /// One minus the utterance error rate against the reference.
    OracleWer,
}

impl RankingMode {
    pub const ALL: [RankingMode; 4] = [RankingMode::RawAtt, RankingMode::AttCtc, RankingMode::Cem, RankingMode::OracleWer];

    pub fn as_str(self) -> &'static str {
        match self {
            RankingMode::RawAtt => "raw_att",
            RankingMode::AttCtc => "att_ctc",
            RankingMode::Cem => "cem",
            RankingMode::OracleWer => "oracle_wer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoPassConfig {
    pub decode: DecodeConfig,
    pub adapt: AdaptConfig,
    /// Ranking used when `adapt.selection_percentile` is set.
    pub ranking: RankingMode,
    /// Adapt on the references instead of first-pass hypotheses.
    pub oracle_supervision: bool,
    /// With oracle supervision, this fraction of each speaker's reference
    /// tokens is replaced by other tokens before adaptation.
    pub supervision_error_rate: f64,
    /// Only the first `n` utterances of each speaker form the adaptation pool.
    pub max_adapt_utterances: Option<usize>,
}

impl TwoPassConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.decode.validate()?;
        if !(0.0..=1.0).contains(&self.supervision_error_rate) {
            return Err(Error::Config("supervision_error_rate must lie in [0, 1]".into()));
        }
        if self.supervision_error_rate > 0.0 && !self.oracle_supervision {
            return Err(Error::Config("supervision_error_rate needs oracle_supervision".into()));
        }
        Ok(())
    }
}

impl Default for TwoPassConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            adapt: AdaptConfig::default(),
            ranking: RankingMode::Cem,
            oracle_supervision: false,
            supervision_error_rate: 0.0,
            max_adapt_utterances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestUtterance<T> {
    pub utterance_id: String,
    pub speaker_id: String,
    pub features: Tensor<T>,
    pub reference: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SpeakerResult<T> {
    pub speaker_id: String,
    pub utterance_ids: Vec<String>,
    pub pass1: Vec<Hypothesis<T>>,
    pub pass2: Vec<Hypothesis<T>>,
    /// Utterance confidences under the configured ranking.
    pub confidences: Vec<f64>,
    /// Utterances that formed the adaptation set.
    pub selected: Vec<String>,
    /// `None` after a divergence rollback.
    pub state: Option<SpeakerState<T>>,
    pub log: AdaptLog,
}

impl<T: Scalar> SpeakerResult<T> {
    /// (errors, reference tokens) of pass 1 and pass 2 against `refs`.
    pub fn error_counts(&self, refs: &[Vec<usize>]) -> ((usize, usize), (usize, usize)) {
        let count = |hyps: &[Hypothesis<T>]| {
            hyps.iter().zip(refs).fold((0, 0), |(e, n), (h, r)| (e + edit_counts(&h.tokens, r).errors(), n + r.len()))
        };
        (count(&self.pass1), count(&self.pass2))
    }
}

/// First-pass decoding of one speaker's utterances with `r = 0`.
pub fn first_pass<T: Scalar>(model: &ConformerModel<T>, utts: &[TestUtterance<T>], decode: &DecodeConfig) -> Result<Vec<Hypothesis<T>>> {
    utts.iter().map(|u| decode_utterance(model, &u.features, None, decode)).collect()
}

/// Utterance confidences in `[0, 1]`; empty hypotheses score 0.
pub fn utterance_confidences<T: Scalar>(
    mode: RankingMode,
    utts: &[TestUtterance<T>],
    hyps: &[Hypothesis<T>],
    cem: Option<&CemModel>,
) -> Result<Vec<f64>> {
    utts.iter()
        .zip(hyps)
        .map(|(u, h)| {
            if h.tokens.is_empty() {
                return Ok(0.0);
            }
            match mode {
                RankingMode::RawAtt => Ok(h.mean_token_prob().as_f64()),
                RankingMode::AttCtc => Ok((h.score.as_f64() / (h.tokens.len() + 1) as f64).exp().clamp(0.0, 1.0)),
                RankingMode::Cem => {
                    let cem = cem.ok_or_else(|| Error::Config("CEM ranking needs a trained CEM".into()))?;
                    let recs = hypothesis_records(&u.utterance_id, h, None);
                    let scores: Vec<f64> = recs.iter().map(|r| cem.score(r)).collect::<Result<_>>()?;
                    utterance_confidence(&scores)
                }
                RankingMode::OracleWer => {
                    let r = u.reference.as_deref().ok_or_else(|| Error::Config("oracle ranking needs references".into()))?;
                    let wer = edit_counts(&h.tokens, r).errors() as f64 / r.len().max(1) as f64;
                    Ok((1.0 - wer).clamp(0.0, 1.0))
                }
            }
        })
        .collect()
}

/// Selection, adaptation and second-pass decoding for one speaker, given
/// its first-pass hypotheses. A diverged estimate rolls back to `r = 0`.
pub fn second_pass<T: Scalar>(
    model: &ConformerModel<T>,
    utts: &[TestUtterance<T>],
    pass1: &[Hypothesis<T>],
    cfg: &TwoPassConfig,
    cem: Option<&CemModel>,
) -> Result<SpeakerResult<T>> {
    let speaker_id = utts.first().map(|u| u.speaker_id.clone()).ok_or(Error::EmptyAdaptationSet)?;
    let confidences = match cfg.adapt.selection_percentile {
        Some(_) => utterance_confidences(cfg.ranking, utts, pass1, cem)?,
        None => pass1.iter().map(|h| h.mean_token_prob().as_f64()).collect(),
    };
    let pool = utts.len().min(cfg.max_adapt_utterances.unwrap_or(usize::MAX));
    let mut supervision: Vec<Vec<usize>> = if cfg.oracle_supervision {
        utts[..pool]
            .iter()
            .map(|u| u.reference.clone().ok_or_else(|| Error::Config("oracle supervision needs references".into())))
            .collect::<Result<_>>()?
    } else {
        pass1[..pool].iter().map(|h| h.tokens.clone()).collect()
    };
    if cfg.oracle_supervision && cfg.supervision_error_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.adapt.seed, &format!("noise:{speaker_id}")));
        corrupt_references(&mut supervision, cfg.supervision_error_rate, model.config.vocab_size, &mut rng);
    }
    let source = if cfg.oracle_supervision { Source::Oracle } else { Source::FirstPassHypothesis };
    let mut set = AdaptationSet::new(speaker_id.clone());
    for ((u, sup), &c) in utts.iter().zip(supervision).zip(&confidences) {
        set.utterances.push(AdaptUtterance { utterance_id: u.utterance_id.clone(), features: u.features.clone(), supervision: sup, confidence: Some(c), source });
    }
    if let Some(p) = cfg.adapt.selection_percentile {
        set = set.select(p)?;
    }
    let selected = set.utterances.iter().map(|u| u.utterance_id.clone()).collect();

    let outcome = match cfg.adapt.mode {
        AdaptMode::Deterministic => estimate_lhuc(model, &set, &cfg.adapt).map(|(p, l)| (SpeakerState::Deterministic(p), l)),
        AdaptMode::Bayesian => bayes_adapt(model, &set, &cfg.adapt).map(|(q, l)| (SpeakerState::Variational(q), l)),
    };
    let (state, log) = settle(outcome, &speaker_id)?;
    let params = state.as_ref().map(|s| s.decode_params(&speaker_id));
    let pass2 = utts.iter().map(|u| decode_utterance(model, &u.features, params.as_ref(), &cfg.decode)).collect::<Result<_>>()?;
    Ok(SpeakerResult {
        speaker_id,
        utterance_ids: utts.iter().map(|u| u.utterance_id.clone()).collect(),
        pass1: pass1.to_vec(),
        pass2,
        confidences,
        selected,
        state,
        log,
    })
}

/// Rolls a diverged or data-starved estimate back to the identity transform.
pub(crate) fn settle<T>(outcome: Result<(SpeakerState<T>, AdaptLog)>, speaker_id: &str) -> Result<(Option<SpeakerState<T>>, AdaptLog)> {
    match outcome {
        Ok((s, l)) => Ok((Some(s), l)),
        Err(Error::DivergedLoss { .. }) | Err(Error::EmptyAdaptationSet) => {
            Ok((None, AdaptLog { speaker_id: speaker_id.to_string(), rows: Vec::new(), diverged: true }))
        }
        Err(e) => Err(e),
    }
}

/// Groups utterances by speaker, preserving input order within a speaker.
pub fn group_by_speaker<T: Clone>(utts: &[TestUtterance<T>]) -> BTreeMap<String, Vec<TestUtterance<T>>> {
    let mut m: BTreeMap<String, Vec<TestUtterance<T>>> = BTreeMap::new();
    for u in utts {
        m.entry(u.speaker_id.clone()).or_default().push(u.clone());
    }
    m
}

/// Unsupervised two-pass adaptation of every speaker in `utts`. Speakers
/// run in parallel; each job reads only the frozen model and its own data,
/// so the result is independent of scheduling. Output is sorted by speaker.
pub fn two_pass_adapt<T: Scalar>(
    model: &ConformerModel<T>,
    utts: &[TestUtterance<T>],
    cfg: &TwoPassConfig,
    cem: Option<&CemModel>,
) -> Result<Vec<SpeakerResult<T>>> {
    cfg.validate()?;
    let groups: Vec<(String, Vec<TestUtterance<T>>)> = group_by_speaker(utts).into_iter().collect();
    groups
        .par_iter()
        .map(|(_, su)| {
            let pass1 = first_pass(model, su, &cfg.decode)?;
            second_pass(model, su, &pass1, cfg, cem)
        })
        .collect()
}
