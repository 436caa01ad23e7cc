use std::collections::BTreeMap;

use lhuc_autograd::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower and upper clamp on per-channel speaker gains.
pub const GAIN_MIN: f64 = 0.1;
pub const GAIN_MAX: f64 = 1.9;

/// Candidate prototype sets drawn per corpus.
const PROTOTYPE_DRAWS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Training speakers.
    pub num_speakers: usize,
    /// Held-out speakers, disjoint from the training speakers.
    pub num_test_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Extra utterances per training speaker held out as the dev split.
    pub dev_utterances_per_speaker: usize,
    /// Speakers outside the training split whose utterances all join the
    /// dev split, so dev decodes show unseen-speaker error rates. They are
    /// drawn after the test speakers and leave the other splits unchanged.
    pub num_dev_speakers: usize,
    /// Model vocabulary size: blank (0) and the shared sos/eos (last id)
    /// included, so lexical tokens are `1..vocab_size - 1`.
    pub vocab_size: usize,
    /// Inclusive range of tokens per utterance.
    pub token_len_range: (usize, usize),
    pub frames_per_token: usize,
    pub feat_dim: usize,
    pub speaker_gain_log_std: f64,
    /// Log-std of a per-speaker level shared by all channels, added to the
    /// per-channel log gains.
    pub shared_gain_log_std: f64,
    pub noise_std: f64,
    /// Spread of the token envelopes around their mean level; smaller values
    /// make tokens harder to tell apart under a channel gain.
    pub prototype_contrast: f64,
    /// Tokens share spectral shapes in groups of this size and differ only
    /// in overall level, so telling them apart needs the speaker's gain.
    pub loudness_levels: usize,
    /// Level of group member `j` is `1 + j * loudness_step`.
    pub loudness_step: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            num_test_speakers: 8,
            utterances_per_speaker: 30,
            dev_utterances_per_speaker: 5,
            num_dev_speakers: 40,
            vocab_size: 10,
            token_len_range: (3, 6),
            frames_per_token: 8,
            feat_dim: 8,
            speaker_gain_log_std: 0.5,
            shared_gain_log_std: 0.0,
            noise_std: 0.25,
            prototype_contrast: 0.8,
            loudness_levels: 1,
            loudness_step: 0.6,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SpecInvalid(m.to_string()));
        if self.num_speakers == 0 || self.utterances_per_speaker == 0 || self.feat_dim == 0 || self.frames_per_token == 0 {
            return bad("speaker, utterance, feature and frame counts must be at least 1");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        let (lo, hi) = self.token_len_range;
        if lo == 0 || lo > hi {
            return bad("token_len_range must be a non-empty range of positive lengths");
        }
        if self.loudness_levels == 0 || !(self.loudness_step >= 0.0) {
            return bad("loudness_levels must be at least 1 and loudness_step non-negative");
        }
        if !(self.shared_gain_log_std >= 0.0) {
            return bad("shared_gain_log_std must be non-negative");
        }
        if !(self.speaker_gain_log_std >= 0.0) || !(self.noise_std >= 0.0) || !(self.prototype_contrast >= 0.0) {
            return bad("standard deviations and contrast must be non-negative");
        }
        Ok(())
    }

    pub fn num_lexical(&self) -> usize {
        self.vocab_size - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub split: Split,
    /// `[frames, feat_dim]`
    pub features: Tensor<f64>,
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerInfo {
    pub speaker_id: String,
    pub is_test: bool,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<SpeakerInfo>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Utterances of a split grouped by speaker, in generation order.
    pub fn by_speaker(&self, split: Split) -> BTreeMap<String, Vec<&Utterance>> {
        let mut m: BTreeMap<String, Vec<&Utterance>> = BTreeMap::new();
        for u in self.split(split) {
            m.entry(u.speaker_id.clone()).or_default().push(u);
        }
        m
    }

    /// Fails if a speaker has utterances in both the test split and a
    /// training-side split.
    pub fn check_speaker_disjoint(&self) -> Result<()> {
        let test: std::collections::BTreeSet<&str> = self.split(Split::Test).map(|u| u.speaker_id.as_str()).collect();
        if let Some(u) = self.utterances.iter().find(|u| u.split != Split::Test && test.contains(u.speaker_id.as_str())) {
            return Err(Error::SpecInvalid(format!("speaker {} appears in train and test", u.speaker_id)));
        }
        Ok(())
    }
}

/// Per-token spectral envelope and temporal shape.
#[derive(Debug, Clone)]
pub struct Prototypes {
    /// `[lexical token][frame][channel]`, index 0 is token id 1.
    pub patterns: Vec<Tensor<f64>>,
}

impl Prototypes {
    pub fn generate(spec: &CorpusSpec, rng: &mut impl Rng) -> Self {
        let (f, d) = (spec.frames_per_token, spec.feat_dim);
        let n = spec.num_lexical();
        let shapes = n.div_ceil(spec.loudness_levels);
        // Best of several draws by smallest pairwise envelope distance, so no
        // seed yields two near-identical shapes.
        let mut envs: Vec<Vec<f64>> = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for _ in 0..PROTOTYPE_DRAWS {
            let cand: Vec<Vec<f64>> =
                (0..shapes).map(|_| (0..d).map(|_| 1.0 + spec.prototype_contrast * rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut sep = f64::INFINITY;
            for i in 0..shapes {
                for j in 0..i {
                    let dist: f64 = cand[i].iter().zip(&cand[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    sep = sep.min(dist);
                }
            }
            if sep > best {
                best = sep;
                envs = cand;
            }
        }
        let patterns = (0..n)
            .map(|k| {
                let level = 1.0 + spec.loudness_step * (k / shapes) as f64;
                let env = &envs[k % shapes];
                let mut data = Vec::with_capacity(f * d);
                for t in 0..f {
                    // Energy dips at token edges so repeated tokens stay separable.
                    let shape = 0.5 + 0.5 * (std::f64::consts::PI * (t as f64 + 0.5) / f as f64).sin();
                    data.extend(env.iter().map(|e| level * e * shape));
                }
                Tensor::new(vec![f, d], data).expect("prototype shape")
            })
            .collect();
        Self { patterns }
    }

    pub fn render(&self, tokens: &[usize], gains: &[f64], noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> Tensor<f64> {
        let f = self.patterns[0].shape()[0];
        let d = gains.len();
        let mut data = Vec::with_capacity(tokens.len() * f * d);
        for &tok in tokens {
            let p = &self.patterns[tok - 1];
            for row in p.rows() {
                data.extend(row.iter().zip(gains).map(|(v, g)| v * g));
            }
        }
        if let Some((dist, rng)) = noise {
            for v in &mut data {
                *v += dist.sample(rng);
            }
        }
        Tensor::new(vec![tokens.len() * f, d], data).expect("utterance shape")
    }
}

/// `exp(a + N(0, s^2))` per channel with a shared `a ~ N(0, s_shared^2)`,
/// clamped into the LHUC-representable range.
pub fn draw_gains(spec: &CorpusSpec, rng: &mut impl Rng) -> Vec<f64> {
    let shared = if spec.shared_gain_log_std > 0.0 {
        Normal::new(0.0, spec.shared_gain_log_std).expect("non-negative std").sample(rng)
    } else {
        0.0
    };
    if spec.speaker_gain_log_std == 0.0 {
        return vec![shared.exp().clamp(GAIN_MIN, GAIN_MAX); spec.feat_dim];
    }
    let dist = Normal::new(0.0, spec.speaker_gain_log_std).expect("non-negative std");
    (0..spec.feat_dim).map(|_| (shared + dist.sample(rng)).exp().clamp(GAIN_MIN, GAIN_MAX)).collect()
}

/// Deterministic corpus for `spec.seed`. Speakers `s000..` train, `t000..`
/// test, `d000..` dev only.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = Prototypes::generate(spec, &mut rng);
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("non-negative std"));
    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    let plan = (0..spec.num_speakers)
        .map(|i| (format!("s{i:03}"), Split::Train))
        .chain((0..spec.num_test_speakers).map(|i| (format!("t{i:03}"), Split::Test)))
        .chain((0..spec.num_dev_speakers).map(|i| (format!("d{i:03}"), Split::Dev)));
    for (speaker_id, role) in plan {
        let gains = draw_gains(spec, &mut rng);
        let is_test = role == Split::Test;
        let splits: Vec<Split> = match role {
            Split::Train => {
                let mut v = vec![Split::Train; spec.utterances_per_speaker];
                v.extend(std::iter::repeat(Split::Dev).take(spec.dev_utterances_per_speaker));
                v
            }
            other => vec![other; spec.utterances_per_speaker],
        };
        for (k, split) in splits.into_iter().enumerate() {
            let len = rng.gen_range(spec.token_len_range.0..=spec.token_len_range.1);
            let reference: Vec<usize> = (0..len).map(|_| rng.gen_range(1..spec.vocab_size - 1)).collect();
            let features = protos.render(&reference, &gains, noise.as_ref().map(|n| (n, &mut rng)));
            utterances.push(Utterance { utterance_id: format!("{speaker_id}-{k:03}"), speaker_id: speaker_id.clone(), split, features, reference });
        }
        speakers.push(SpeakerInfo { speaker_id, is_test, gains });
    }
    let corpus = Corpus { speakers, utterances };
    corpus.check_speaker_disjoint()?;
    Ok(corpus)
}

/// Replaces exactly `round(rate * total tokens)` tokens, chosen uniformly
/// across all sequences, with a different lexical token.
pub fn corrupt_references(refs: &mut [Vec<usize>], rate: f64, vocab_size: usize, rng: &mut impl Rng) {
    let total: usize = refs.iter().map(Vec::len).sum();
    let k = ((rate.clamp(0.0, 1.0) * total as f64).round() as usize).min(total);
    if k == 0 || vocab_size < 4 {
        return;
    }
    let positions: Vec<(usize, usize)> = refs.iter().enumerate().flat_map(|(i, r)| (0..r.len()).map(move |j| (i, j))).collect();
    for p in sample(rng, total, k).into_vec() {
        let (i, j) = positions[p];
        let old = refs[i][j];
        // Uniform over the other lexical tokens.
        let mut new = rng.gen_range(1..vocab_size - 2);
        if new >= old {
            new += 1;
        }
        refs[i][j] = new;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism_and_shapes() {
        let spec = CorpusSpec { num_speakers: 3, num_test_speakers: 2, num_dev_speakers: 2, utterances_per_speaker: 4, ..Default::default() };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utterances.len(), 3 * (4 + 5) + 2 * 4 + 2 * 4);
        let train: std::collections::BTreeSet<&str> = a.split(Split::Train).map(|u| u.speaker_id.as_str()).collect();
        assert_eq!(a.split(Split::Dev).filter(|u| !train.contains(u.speaker_id.as_str())).count(), 2 * 4);
        for u in &a.utterances {
            assert_eq!(u.features.shape(), &[u.reference.len() * spec.frames_per_token, spec.feat_dim]);
            assert!(u.features.is_finite());
            assert!(u.reference.iter().all(|&t| (1..spec.vocab_size - 1).contains(&t)));
        }
        a.check_speaker_disjoint().unwrap();
    }

    #[test]
    fn dev_speakers_leave_train_and_test_unchanged() {
        let base = CorpusSpec { num_speakers: 3, num_test_speakers: 2, num_dev_speakers: 0, utterances_per_speaker: 4, ..Default::default() };
        let a = generate_corpus(&base).unwrap();
        let b = generate_corpus(&CorpusSpec { num_dev_speakers: 3, ..base }).unwrap();
        assert_eq!(a.utterances[..], b.utterances[..a.utterances.len()]);
        assert!(b.utterances[a.utterances.len()..].iter().all(|u| u.split == Split::Dev && u.speaker_id.starts_with('d')));
    }

    #[test]
    fn no_variability_means_identical_speakers() {
        let spec = CorpusSpec { speaker_gain_log_std: 0.0, noise_std: 0.0, num_speakers: 2, ..Default::default() };
        let c = generate_corpus(&spec).unwrap();
        assert!(c.speakers.iter().all(|s| s.gains.iter().all(|&g| g == 1.0)));
    }

    #[test]
    fn gains_are_clamped() {
        let spec = CorpusSpec { speaker_gain_log_std: 3.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert!(draw_gains(&spec, &mut rng).iter().all(|g| (GAIN_MIN..=GAIN_MAX).contains(g)));
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            CorpusSpec { num_speakers: 0, ..Default::default() },
            CorpusSpec { vocab_size: 3, ..Default::default() },
            CorpusSpec { token_len_range: (4, 2), ..Default::default() },
            CorpusSpec { noise_std: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_corpus(&spec), Err(Error::SpecInvalid(_))));
        }
    }

    #[test]
    fn corruption_hits_requested_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let orig: Vec<Vec<usize>> = (0..20).map(|i| vec![1 + i % 8; 5]).collect();
        for rate in [0.0, 0.1, 0.3, 0.5] {
            let mut refs = orig.clone();
            corrupt_references(&mut refs, rate, 10, &mut rng);
            let changed: usize = refs.iter().zip(&orig).map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count()).sum();
            assert_eq!(changed, (rate * 100.0).round() as usize);
            assert!(refs.iter().flatten().all(|&t| (1..9).contains(&t)));
        }
    }
}
