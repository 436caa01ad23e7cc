//! Small, fast configurations shared by unit and integration tests.

use crate::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use crate::model::ModelConfig;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        num_encoder_blocks: 1,
        num_decoder_blocks: 1,
        d_model: 8,
        d_ffn: 16,
        num_heads: 2,
        conv_kernel: 3,
        vocab_size: 6,
        subsample_channels: 2,
        max_decode_len: 32,
        ..ModelConfig::default()
    }
}

pub fn tiny_corpus_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        num_speakers: 3,
        num_test_speakers: 2,
        utterances_per_speaker: 4,
        dev_utterances_per_speaker: 1,
        num_dev_speakers: 1,
        vocab_size: 6,
        token_len_range: (2, 3),
        feat_dim: 4,
        seed,
        ..CorpusSpec::default()
    }
}

pub fn tiny_corpus(seed: u64) -> Corpus {
    generate_corpus(&tiny_corpus_spec(seed)).expect("valid tiny spec")
}

/// Test-split utterances as two-pass inputs, references attached.
pub fn test_utterances(corpus: &Corpus) -> Vec<crate::adaptation::TestUtterance<f64>> {
    corpus
        .split(Split::Test)
        .map(|u| crate::adaptation::TestUtterance {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            features: u.features.clone(),
            reference: Some(u.reference.clone()),
        })
        .collect()
}
