//! Seeded baseline on the mild corpus: per-channel gain log-std 0.5 and
//! noise 0.1 over 20 training speakers with 30 utterances each.

use lhuc_core::corpus::{generate_corpus, CorpusSpec, Split};
use lhuc_core::decoding::edit_counts;
use lhuc_core::pipeline::{self, ExperimentConfig};

#[test]
fn mild_corpus_baseline_trains_and_adaptation_helps() {
    let mut cfg = ExperimentConfig::default().with_seed(0);
    cfg.corpus = CorpusSpec { speaker_gain_log_std: 0.5, noise_std: 0.1, num_speakers: 20, utterances_per_speaker: 30, ..cfg.corpus };
    let utts = generate_corpus(&cfg.corpus).unwrap().utterances;
    let (si, _) = pipeline::train_system(&utts, &cfg.model, &cfg.train, false).unwrap();

    let (mut errors, mut tokens) = (0, 0);
    for u in pipeline::eval_inputs(&utts, Split::Dev) {
        let h = lhuc_core::decoding::decode_utterance(&si.model, &u.features, None, &cfg.two_pass.decode).unwrap();
        let r = u.reference.unwrap();
        errors += edit_counts(&h.tokens, &r).errors();
        tokens += r.len();
    }
    let dev_wer = errors as f64 / tokens as f64;
    assert!(dev_wer < 0.30, "dev WER {dev_wer}");

    let test = pipeline::eval_inputs(&utts, Split::Test);
    let run = pipeline::run_two_pass(&si.model, &test, &cfg.two_pass, None).unwrap();
    eprintln!("dev WER {dev_wer:.4}, test pass1 {:.4} pass2 {:.4}", run.pass1.wer, run.pass2.wer);
    assert!(run.pass2.wer < run.pass1.wer, "pass1 {} pass2 {}", run.pass1.wer, run.pass2.wer);
}
