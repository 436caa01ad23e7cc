use super::*;
use crate::corpus::Split;
use crate::decoding::decode_utterance;
use crate::fixtures::{test_utterances, tiny_corpus, tiny_model_config};
use crate::model::{ConformerModel, SpeakerParams};
use crate::objectives::VariationalPosterior;

fn model() -> ConformerModel<f64> {
    ConformerModel::new(tiny_model_config(), 3).unwrap()
}

fn oracle_set(speaker: &str) -> AdaptationSet<f64> {
    let corpus = tiny_corpus(1);
    let mut set = AdaptationSet::new(speaker);
    for u in corpus.split(Split::Test).filter(|u| u.speaker_id == speaker) {
        set.utterances.push(AdaptUtterance {
            utterance_id: u.utterance_id.clone(),
            features: u.features.clone(),
            supervision: u.reference.clone(),
            confidence: Some(0.5),
            source: Source::Oracle,
        });
    }
    set
}

#[test]
fn zero_learning_rate_keeps_identity() {
    let m = model();
    let cfg = AdaptConfig { steps: 1, learning_rate: 0.0, ..Default::default() };
    let (p, log) = estimate_lhuc(&m, &oracle_set("t000"), &cfg).unwrap();
    assert!(p.r.data().iter().all(|&v| v == 0.0));
    assert!(p.scales().iter().all(|&s| s == 1.0));
    assert_eq!(log.rows.len(), 1);
}

#[test]
fn estimation_lowers_training_loss() {
    let m = model();
    let set = oracle_set("t000");
    let (_, log) = estimate_lhuc(&m, &set, &AdaptConfig { steps: 20, ..Default::default() }).unwrap();
    assert!(log.final_loss().unwrap() < log.initial_loss().unwrap());
}

#[test]
fn empty_set_is_rejected() {
    let m = model();
    let cfg = AdaptConfig::default();
    assert!(matches!(estimate_lhuc(&m, &AdaptationSet::new("x"), &cfg), Err(Error::EmptyAdaptationSet)));
    assert!(matches!(bayes_adapt(&m, &AdaptationSet::new("x"), &cfg), Err(Error::EmptyAdaptationSet)));
}

#[test]
fn divergence_threshold() {
    use super::estimate::check_divergence;
    assert!(check_divergence(3, 9.9, 1.0).is_ok());
    assert!(matches!(check_divergence(3, 10.1, 1.0), Err(Error::DivergedLoss { step: 3, .. })));
    assert!(check_divergence(0, f64::NAN, 1.0).is_err());
    assert!(check_divergence(0, f64::INFINITY, 1.0).is_err());
}

#[test]
fn config_rejects_zero_steps_and_samples() {
    assert!(AdaptConfig { steps: 0, ..Default::default() }.validate().is_err());
    assert!(AdaptConfig { mc_samples: 0, ..Default::default() }.validate().is_err());
    assert!(AdaptConfig { selection_percentile: Some(0.0), ..Default::default() }.validate().is_err());
    assert!(AdaptConfig { selection_percentile: Some(100.0), ..Default::default() }.validate().is_ok());
}

#[test]
fn shared_weights_untouched_by_adaptation() {
    let m = model();
    let before = m.params.tensors().to_vec();
    let set = oracle_set("t001");
    estimate_lhuc(&m, &set, &AdaptConfig { steps: 3, ..Default::default() }).unwrap();
    bayes_adapt(&m, &set, &AdaptConfig { steps: 3, mode: AdaptMode::Bayesian, ..Default::default() }).unwrap();
    assert_eq!(before, m.params.tensors());
}

#[test]
fn bayesian_is_reproducible_per_speaker() {
    let m = model();
    let cfg = AdaptConfig { steps: 4, mode: AdaptMode::Bayesian, mc_samples: 2, ..Default::default() };
    let set = oracle_set("t000");
    let (a, la) = bayes_adapt(&m, &set, &cfg).unwrap();
    let (b, lb) = bayes_adapt(&m, &set, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.rows.iter().all(|r| r.kl >= 0.0));
}

#[test]
fn posterior_prediction_uses_mean_only() {
    let m = model();
    let feats = &tiny_corpus(1).utterances[0].features;
    let mu: Vec<f64> = (0..m.d_lhuc()).map(|i| 0.1 * i as f64 - 0.3).collect();
    let q1 = VariationalPosterior { mu: Tensor::vector(mu.clone()), log_sigma: Tensor::full(vec![m.d_lhuc()], -4.0) };
    let q2 = VariationalPosterior { mu: Tensor::vector(mu.clone()), log_sigma: Tensor::full(vec![m.d_lhuc()], 1.5) };
    let a = predict_with_posterior(&m, &q1, "s", feats).unwrap();
    let b = predict_with_posterior(&m, &q2, "s", feats).unwrap();
    let det = m.encode(feats, Some(&SpeakerParams::new("s", mu))).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.states, det.states);

    let zero = VariationalPosterior::new(m.d_lhuc(), -2.0);
    let si = m.encode(feats, None).unwrap();
    assert_eq!(predict_with_posterior(&m, &zero, "s", feats).unwrap().states, si.states);
}

#[test]
fn selection_keeps_most_confident() {
    let mut set = oracle_set("t000");
    for (i, u) in set.utterances.iter_mut().enumerate() {
        u.confidence = Some(i as f64 / 10.0);
    }
    let kept = set.select(50.0).unwrap();
    assert_eq!(kept.len(), 2);
    assert!(kept.utterances.iter().all(|u| u.confidence.unwrap() >= 0.2));
    assert_eq!(set.select(100.0).unwrap(), set);
}

#[test]
fn sat_with_frozen_speakers_matches_si_exactly() {
    let corpus = tiny_corpus(2);
    let train: Vec<_> = corpus.split(Split::Train).collect();
    let data: Vec<TrainUtterance<'_, f64>> =
        train.iter().map(|u| TrainUtterance { speaker_id: &u.speaker_id, features: &u.features, target: &u.reference }).collect();
    let cfg = TrainConfig { epochs: 1, batch_size: 3, freeze_speakers: true, si_fraction: 0.0, ..Default::default() };
    let si = train_si(model(), &data, &cfg).unwrap();
    let sat = sat_train(model(), &data, &cfg).unwrap();
    assert_eq!(si.model.params.tensors(), sat.model.params.tensors());
    assert_eq!(si.epoch_losses, sat.epoch_losses);
    assert!(sat.speakers.values().all(|p| p.r.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn sat_moves_speaker_vectors() {
    let corpus = tiny_corpus(2);
    let train: Vec<_> = corpus.split(Split::Train).collect();
    let data: Vec<TrainUtterance<'_, f64>> =
        train.iter().map(|u| TrainUtterance { speaker_id: &u.speaker_id, features: &u.features, target: &u.reference }).collect();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, speaker_steps: 2, ..Default::default() };
    let out = sat_train(model(), &data, &cfg).unwrap();
    assert_eq!(out.speakers.len(), 3);
    assert!(out.speakers.values().all(|p| p.r.data().iter().any(|&v| v != 0.0)));
    let one: Vec<_> = data.iter().copied().filter(|u| u.speaker_id == "s000").collect();
    assert!(sat_train(model(), &one, &cfg).is_err());
}

#[test]
fn two_pass_without_learning_reproduces_first_pass() {
    let m = model();
    let utts = test_utterances(&tiny_corpus(1));
    let cfg = TwoPassConfig { adapt: AdaptConfig { steps: 2, learning_rate: 0.0, ..Default::default() }, ..Default::default() };
    for r in two_pass_adapt(&m, &utts, &cfg, None).unwrap() {
        for (a, b) in r.pass1.iter().zip(&r.pass2) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.score, b.score);
        }
    }
}

#[test]
fn full_percentile_equals_no_selection() {
    let m = model();
    let utts = test_utterances(&tiny_corpus(1));
    let base = TwoPassConfig { adapt: AdaptConfig { steps: 3, ..Default::default() }, ranking: RankingMode::RawAtt, ..Default::default() };
    let mut full = base.clone();
    full.adapt.selection_percentile = Some(100.0);
    let a = two_pass_adapt(&m, &utts, &base, None).unwrap();
    let b = two_pass_adapt(&m, &utts, &full, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.selected, y.selected);
        assert_eq!(x.state.as_ref().map(|s| s.decode_params("s")), y.state.as_ref().map(|s| s.decode_params("s")));
        assert_eq!(x.pass2.iter().map(|h| &h.tokens).collect::<Vec<_>>(), y.pass2.iter().map(|h| &h.tokens).collect::<Vec<_>>());
    }
}

#[test]
fn speakers_are_isolated() {
    let m = model();
    let utts = test_utterances(&tiny_corpus(1));
    let only_a: Vec<_> = utts.iter().filter(|u| u.speaker_id == "t000").cloned().collect();
    let cfg = TwoPassConfig { adapt: AdaptConfig { steps: 3, ..Default::default() }, oracle_supervision: true, ..Default::default() };
    let both = two_pass_adapt(&m, &utts, &cfg, None).unwrap();
    let alone = two_pass_adapt(&m, &only_a, &cfg, None).unwrap();
    assert_eq!(both.len(), 2);
    assert_eq!(alone.len(), 1);
    assert_eq!(both[0].speaker_id, "t000");
    assert_eq!(both[0].state.as_ref().map(|s| s.decode_params("t000")), alone[0].state.as_ref().map(|s| s.decode_params("t000")));
    assert_eq!(both[0].pass2, alone[0].pass2);
}

#[test]
fn oracle_ranking_prefers_correct_hypotheses() {
    let m = model();
    let utts = test_utterances(&tiny_corpus(1));
    let hyps = first_pass(&m, &utts, &crate::decoding::DecodeConfig::default()).unwrap();
    let conf = utterance_confidences(RankingMode::OracleWer, &utts, &hyps, None).unwrap();
    for ((u, h), c) in utts.iter().zip(&hyps).zip(&conf) {
        assert!((0.0..=1.0).contains(c));
        if !h.tokens.is_empty() && &h.tokens == u.reference.as_ref().unwrap() {
            assert_eq!(*c, 1.0);
        }
    }
    assert!(utterance_confidences(RankingMode::Cem, &utts, &hyps, None).is_err());
}

#[test]
fn divergence_rolls_back_to_identity() {
    let diverged: Result<(crate::model::checkpoint::SpeakerState<f64>, AdaptLog)> = Err(Error::DivergedLoss { step: 4, loss: f64::NAN, initial: 1.0 });
    let (state, log) = two_pass::settle(diverged, "t000").unwrap();
    assert!(state.is_none());
    assert!(log.diverged);
    let other: Result<(crate::model::checkpoint::SpeakerState<f64>, AdaptLog)> = Err(Error::Config("x".into()));
    assert!(two_pass::settle(other, "t000").is_err());
}

#[test]
fn derived_seeds_differ_by_key_and_seed() {
    assert_ne!(derive_seed(0, "a"), derive_seed(0, "b"));
    assert_ne!(derive_seed(0, "a"), derive_seed(1, "a"));
    assert_eq!(derive_seed(7, "spk"), derive_seed(7, "spk"));
}

#[test]
fn adaptation_log_csv() {
    let log = AdaptLog { speaker_id: "t0".into(), rows: vec![AdaptLogRow { step: 0, loss: 1.5, kl: 0.0, lr: 0.1 }], diverged: false };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    AdaptLog::save_all(&p, &[log]).unwrap();
    assert_eq!(std::fs::read_to_string(p).unwrap(), "speaker_id,step,loss,kl,lr\nt0,0,1.5,0,0.1\n");
}

#[test]
fn decode_with_identity_speaker_equals_si() {
    let m = model();
    let f = &tiny_corpus(1).utterances[3].features;
    let cfg = crate::decoding::DecodeConfig::default();
    let a = decode_utterance(&m, f, None, &cfg).unwrap();
    let b = decode_utterance(&m, f, Some(&SpeakerParams::identity("x", m.d_lhuc())), &cfg).unwrap();
    assert_eq!(a, b);
}
