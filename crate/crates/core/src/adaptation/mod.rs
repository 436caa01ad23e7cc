//! Speaker-adaptive training and test-time LHUC estimation, deterministic
//! and Bayesian, plus the two-pass unsupervised protocol.

mod estimate;
mod log;
mod sat;
mod two_pass;

use lhuc_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub use estimate::{bayes_adapt, estimate_lhuc, predict_with_posterior};
pub use log::{AdaptLog, AdaptLogRow};
pub use sat::{sat_train, train_si, TrainConfig, TrainOutcome, TrainUtterance};
pub use two_pass::{first_pass, group_by_speaker, second_pass, two_pass_adapt, utterance_confidences, RankingMode, SpeakerResult, TestUtterance, TwoPassConfig};

use crate::confidence::select_top_percentile;
use crate::error::{Error, Result};
use crate::objectives::{MultitaskConfig, PriorSpec};

/// Where an utterance's supervision came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Oracle,
    FirstPassHypothesis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptUtterance<T> {
    pub utterance_id: String,
    pub features: Tensor<T>,
    pub supervision: Vec<usize>,
    pub confidence: Option<f64>,
    pub source: Source,
}

/// One speaker's adaptation data.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSet<T> {
    pub speaker_id: String,
    pub utterances: Vec<AdaptUtterance<T>>,
}

impl<T: Scalar> AdaptationSet<T> {
    pub fn new(speaker_id: impl Into<String>) -> Self {
        Self { speaker_id: speaker_id.into(), utterances: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Keeps the most confident `percentile` percent (see
    /// [`select_top_percentile`]).
    pub fn select(&self, percentile: f64) -> Result<Self> {
        let conf: Vec<Option<f64>> = self.utterances.iter().map(|u| u.confidence).collect();
        let ids: Vec<&str> = self.utterances.iter().map(|u| u.utterance_id.as_str()).collect();
        let keep = select_top_percentile(&conf, &ids, percentile)?;
        Ok(Self { speaker_id: self.speaker_id.clone(), utterances: keep.into_iter().map(|i| self.utterances[i].clone()).collect() })
    }

    /// First `n` utterances.
    pub fn truncate(&self, n: usize) -> Self {
        Self { speaker_id: self.speaker_id.clone(), utterances: self.utterances.iter().take(n).cloned().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    #[default]
    Deterministic,
    Bayesian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub steps: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    /// Prior mean and standard deviation, shared by every dimension.
    pub prior_mu: f64,
    pub prior_sigma: f64,
    pub log_sigma_init: f64,
    pub selection_percentile: Option<f64>,
    pub multitask: MultitaskConfig,
    /// Seeds the Monte-Carlo noise; mixed with the speaker id per job.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Deterministic,
            steps: 50,
            learning_rate: 0.01,
            mc_samples: 1,
            prior_mu: 0.0,
            prior_sigma: 1.0,
            log_sigma_init: 0.01f64.ln(),
            selection_percentile: None,
            multitask: MultitaskConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative and finite");
        }
        if !(self.prior_sigma > 0.0) {
            return bad("prior_sigma must be positive");
        }
        if let Some(p) = self.selection_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return bad("selection_percentile must lie in (0, 100]");
            }
        }
        self.multitask.validate()
    }

    pub fn prior<T: Scalar>(&self, d: usize) -> PriorSpec<T> {
        PriorSpec { mu_r: Tensor::full(vec![d], T::lit(self.prior_mu)), sigma_r: Tensor::full(vec![d], T::lit(self.prior_sigma)) }
    }
}

/// Per-job seed derived from a global seed and a string key, independent of
/// scheduling order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a, then a splitmix finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests;
