use lhuc_autograd::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::fixtures::tiny_model_config;
use crate::model::{ConformerModel, ModelConfig};
use crate::objectives::ctc_loss_value;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random model with sharpened outputs, so searches have real choices.
fn peaky_model(config: ModelConfig, seed: u64) -> ConformerModel<f64> {
    let mut m = ConformerModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.3 * normal(&mut rng));
    }
    m
}

fn features(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![frames, dim], (0..frames * dim).map(|_| normal(&mut rng)).collect()).unwrap()
}

fn att_only(beam_size: usize) -> DecodeConfig {
    DecodeConfig { beam_size, ctc_weight: 0.0, ..Default::default() }
}

/// Attention log-probability of `tokens` followed by eos.
fn sequence_score(m: &ConformerModel<f64>, enc: &crate::model::EncoderOutput<f64>, tokens: &[usize]) -> f64 {
    let mut prefix = vec![m.config.sos()];
    let mut s = 0.0;
    for &t in tokens.iter().chain(std::iter::once(&m.config.eos())) {
        s += m.decode_step(enc, &prefix).unwrap().log_probs[t];
        prefix.push(t);
    }
    s
}

#[test]
fn beam_one_equals_greedy() {
    for seed in 0..10 {
        let m = peaky_model(tiny_model_config(), seed);
        let enc = m.encode(&features(20, 4, seed), None).unwrap();
        let cfg = att_only(1);
        let h = beam_search(&m, &enc, &cfg).unwrap();
        assert_eq!(h.tokens, greedy_decode(&m, &enc, max_tokens(&m, enc.frames, &cfg)).unwrap(), "seed {seed}");
    }
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    // Three lexical tokens and at most two of them: 13 complete sequences.
    let config = ModelConfig { vocab_size: 5, max_decode_len: 4, ..tiny_model_config() };
    for seed in 0..10 {
        let m = peaky_model(config.clone(), seed);
        let enc = m.encode(&features(12, 4, seed + 100), None).unwrap();
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for a in 1..4 {
            seqs.push(vec![a]);
            for b in 1..4 {
                seqs.push(vec![a, b]);
            }
        }
        assert_eq!(max_tokens(&m, enc.frames, &att_only(1)), 2);
        let best = seqs
            .iter()
            .map(|s| (sequence_score(&m, &enc, s), s.clone()))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        let h = beam_search(&m, &enc, &att_only(9)).unwrap();
        assert_eq!(h.tokens, best.1, "seed {seed}");
        assert!((h.score - best.0).abs() < 1e-9);
    }
}

#[test]
fn wider_beams_do_not_lower_the_score() {
    let mut checked = 0;
    for seed in 0..20 {
        let m = peaky_model(tiny_model_config(), seed);
        let enc = m.encode(&features(24, 4, seed + 7), None).unwrap();
        let scores: Vec<f64> = [1, 2, 4, 8].iter().map(|&b| beam_search(&m, &enc, &att_only(b)).unwrap().score).collect();
        for w in scores.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "seed {seed}: {scores:?}");
        }
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn attention_only_score_is_the_token_sum() {
    let m = peaky_model(tiny_model_config(), 3);
    let enc = m.encode(&features(20, 4, 3), None).unwrap();
    let h = beam_search(&m, &enc, &att_only(4)).unwrap();
    assert!(h.finished);
    let sum: f64 = h.token_info.iter().map(|t| t.log_prob).sum::<f64>() + h.eos_log_prob.unwrap();
    assert!((h.score - sum).abs() < 1e-9);
    assert!((h.att_score - sum).abs() < 1e-9);
    assert!((h.score - sequence_score(&m, &enc, &h.tokens)).abs() < 1e-9);
    assert!(h.token_info.iter().all(|t| t.prob() > 0.0 && t.prob() <= 1.0));
}

#[test]
fn joint_score_interpolates_attention_and_ctc() {
    let m = peaky_model(tiny_model_config(), 4);
    let enc = m.encode(&features(24, 4, 4), None).unwrap();
    let cfg = DecodeConfig::default();
    assert_eq!(cfg.ctc_weight, 0.3);
    let h = beam_search(&m, &enc, &cfg).unwrap();
    assert!(h.finished);
    let ctc = -ctc_loss_value(&m.ctc_logits(&enc).unwrap(), &h.tokens, m.config.blank()).unwrap();
    assert!((h.ctc_score - ctc).abs() < 1e-9);
    assert!((h.score - (0.7 * h.att_score + 0.3 * h.ctc_score)).abs() < 1e-9);
}

#[test]
fn per_token_evidence_is_retained() {
    let m = peaky_model(tiny_model_config(), 5);
    let enc = m.encode(&features(24, 4, 5), None).unwrap();
    let h = beam_search(&m, &enc, &DecodeConfig::default()).unwrap();
    for t in &h.token_info {
        assert_eq!(t.hidden.len(), m.config.d_model);
        assert_eq!(t.top_probs.len(), TOP_K);
        assert!(t.top_probs.windows(2).all(|w| w[0] >= w[1]));
        assert!(t.prob() <= t.top_probs[0] + 1e-12);
    }
}

#[test]
fn length_bound_follows_frames_and_config() {
    let m = ConformerModel::<f64>::new(tiny_model_config(), 1).unwrap();
    assert_eq!(max_tokens(&m, 5, &DecodeConfig::default()), 5);
    assert_eq!(max_tokens(&m, 5, &DecodeConfig { max_len_ratio: 0.5, ..Default::default() }), 2);
    assert_eq!(max_tokens(&m, 500, &DecodeConfig::default()), m.config.max_decode_len - 2);
    assert_eq!(max_tokens(&m, 0, &DecodeConfig::default()), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(DecodeConfig { beam_size: 0, ..Default::default() }.validate().is_err());
    assert!(DecodeConfig { ctc_weight: 1.5, ..Default::default() }.validate().is_err());
    assert!(DecodeConfig { max_len_ratio: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn batch_wer_is_totals_over_totals() {
    // One wrong token in a length-1 reference, none in a length-9 one.
    let refs = vec![vec![1], vec![2; 9]];
    let hyps = vec![vec![3], vec![2; 9]];
    let r = word_error_rate(&hyps, &refs).unwrap();
    assert!((r.wer - 0.1).abs() < 1e-15);
    let mean_per_utt = (1.0 + 0.0) / 2.0;
    assert!(r.wer != mean_per_utt);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decoding_is_deterministic(seed in 0u64..1000, frames in 8usize..24) {
        let m = peaky_model(tiny_model_config(), seed % 7);
        let x = features(frames, 4, seed);
        let a = decode_utterance(&m, &x, None, &DecodeConfig::default()).unwrap();
        let b = decode_utterance(&m, &x, None, &DecodeConfig::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn wer_is_invariant_under_relabeling(
        refs in prop::collection::vec(prop::collection::vec(0usize..5, 1..6), 1..5),
        hyps in prop::collection::vec(prop::collection::vec(0usize..5, 0..6), 1..5),
        shift in 1usize..5,
    ) {
        let n = refs.len().min(hyps.len());
        let (refs, hyps) = (&refs[..n], &hyps[..n]);
        let relabel = |s: &[Vec<usize>]| s.iter().map(|v| v.iter().map(|t| (t + shift) % 5).collect()).collect::<Vec<Vec<usize>>>();
        let a = word_error_rate(hyps, refs).unwrap();
        let b = word_error_rate(&relabel(hyps), &relabel(refs)).unwrap();
        prop_assert_eq!(a, b);
    }
}
