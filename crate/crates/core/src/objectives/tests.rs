use lhuc_autograd::gradcheck::check_inputs;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::fixtures::tiny_model_config;

fn model() -> ConformerModel<f64> {
    ConformerModel::new(tiny_model_config(), 11).unwrap()
}

fn features(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![frames, dim], data).unwrap()
}

fn log_softmax_rows(logits: &Tensor<f64>) -> Tensor<f64> {
    let v = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

/// Collapses a frame path: merge repeats, then drop blanks.
fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// `-log` of the summed probability of every path that collapses to `target`.
fn brute_force_ctc(lp: &Tensor<f64>, target: &[usize], blank: usize) -> f64 {
    let (frames, v) = (lp.shape()[0], lp.shape()[1]);
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    for code in 0..v.pow(frames as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        if collapse(&path, blank) == target {
            total += path.iter().enumerate().map(|(t, &k)| lp.data()[t * v + k]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

#[test]
fn ctc_single_frame_is_one_alignment() {
    let lp = log_softmax_rows(&features(1, 4, 1));
    let l = ctc_loss_value(&lp, &[2], 0).unwrap();
    assert!((l + lp.data()[2]).abs() < 1e-12);
}

#[test]
fn ctc_repeat_needs_a_separating_blank() {
    let lp = log_softmax_rows(&features(2, 4, 1));
    assert!(matches!(ctc_loss_value(&lp, &[1, 1], 0), Err(Error::TargetTooLongForFrames { needed: 3, frames: 2 })));
    assert_eq!(ctc_min_frames(&[1, 1]), 3);
    assert_eq!(ctc_min_frames(&[1, 2, 2, 2]), 6);
    let lp = log_softmax_rows(&features(3, 4, 1));
    assert!(ctc_loss_value(&lp, &[1, 1], 0).unwrap().is_finite());
}

#[test]
fn ctc_rejects_blank_in_target() {
    let lp = log_softmax_rows(&features(3, 4, 1));
    assert!(matches!(ctc_loss_value(&lp, &[0], 0), Err(Error::BadToken(0))));
}

#[test]
fn ctc_matches_brute_force_on_sampled_instances() {
    let mut seed = 0;
    for frames in 1..=5 {
        for target in [vec![1], vec![1, 2], vec![2, 2], vec![1, 2, 1], vec![3, 3, 3]] {
            if ctc_min_frames(&target) > frames {
                continue;
            }
            seed += 1;
            let lp = log_softmax_rows(&features(frames, 4, seed));
            let fast = ctc_loss_value(&lp, &target, 0).unwrap();
            let slow = brute_force_ctc(&lp, &target, 0);
            assert!((fast - slow).abs() < 1e-9, "frames {frames} target {target:?}: {fast} vs {slow}");
        }
    }
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let logits = features(5, 4, 9);
    let err = check_inputs(
        Graph::new,
        |g, vs| {
            let lp = g.log_softmax(vs[0])?;
            Ok(ctc_loss(g, lp, &[1, 3, 3], 0).unwrap())
        },
        &[logits],
        1e-6,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn ctc_survives_extreme_logits() {
    let mut logits = features(6, 4, 2);
    logits.data_mut().iter_mut().for_each(|x| *x *= 200.0);
    let l = ctc_loss_value(&log_softmax_rows(&logits), &[1, 2], 0).unwrap();
    assert!(!l.is_nan() && l >= -1e-9);
}

#[test]
fn attention_nll_trivial_predictors() {
    let v = 5;
    let outputs = [1, 4, 2, 0];
    let mut onehot = Tensor::full(vec![outputs.len(), v], -50.0);
    for (i, &t) in outputs.iter().enumerate() {
        onehot.data_mut()[i * v + t] = 0.0;
    }
    assert_eq!(attention_nll(&onehot, &outputs).unwrap(), 0.0);
    let uniform = Tensor::full(vec![outputs.len(), v], -(v as f64).ln());
    let l = attention_nll(&uniform, &outputs).unwrap();
    assert!((l - outputs.len() as f64 * (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn attention_loss_equals_sum_of_step_probes() {
    let m = model();
    let x = features(12, 4, 5);
    let target = [2usize, 4, 3];
    let loss = m.attention_loss(&x, &target, None).unwrap();
    let enc = m.encode(&x, None).unwrap();
    let mut prefix = vec![m.config.sos()];
    let mut probe = 0.0;
    for &t in target.iter().chain(std::iter::once(&m.config.eos())) {
        probe -= m.decode_step(&enc, &prefix).unwrap().log_probs[t];
        prefix.push(t);
    }
    assert!((loss - probe).abs() < 1e-10, "{loss} vs {probe}");
}

#[test]
fn attention_loss_rejects_empty_target() {
    let m = model();
    assert!(matches!(m.attention_loss(&features(12, 4, 5), &[], None), Err(Error::EmptyTarget)));
}

#[test]
fn multitask_is_the_convex_combination() {
    let m = model();
    let x = features(16, 4, 6);
    let y = [2usize, 3];
    let att = m.attention_loss(&x, &y, None).unwrap();
    let ctc = m.multitask_loss(&x, &y, None, &MultitaskConfig { lambda: 1.0 }).unwrap();
    assert_eq!(ctc.att, None);
    let zero = m.multitask_loss(&x, &y, None, &MultitaskConfig { lambda: 0.0 }).unwrap();
    assert_eq!(zero.total, att);
    assert_eq!(zero.ctc, None);
    let mix = m.multitask_loss(&x, &y, None, &MultitaskConfig::default()).unwrap();
    assert_eq!(MultitaskConfig::default().lambda, 0.2);
    assert!((mix.total - (0.8 * att + 0.2 * ctc.total)).abs() < 1e-12);
    assert_eq!(mix.att, Some(att));
    assert_eq!(mix.ctc, Some(ctc.total));
}

#[test]
fn lambda_outside_unit_interval_is_rejected() {
    assert!(MultitaskConfig { lambda: 1.5 }.validate().is_err());
    assert!(MultitaskConfig { lambda: -0.1 }.validate().is_err());
}

/// Runs `f` on a model forward that shares the checker's graph.
fn with_forward<'m>(
    m: &'m ConformerModel<f64>,
    g: &mut Graph<f64>,
    f: impl FnOnce(&mut Forward<'m, f64>) -> Result<Var>,
) -> lhuc_autograd::Result<Var> {
    let mut fw = Forward::with_graph(m, std::mem::take(g), false);
    let out = f(&mut fw).expect("forward");
    *g = fw.graph;
    Ok(out)
}

#[test]
fn multitask_gradient_wrt_r() {
    let m = model();
    let x = features(16, 4, 7);
    let r = Tensor::vector(vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.0, -0.1]);
    assert_eq!(r.len(), m.d_lhuc());
    let err = check_inputs(
        Graph::new,
        |g, vs| with_forward(&m, g, |f| Ok(f.multitask_loss(&x, &[2, 4, 2], Some(vs[0]), &MultitaskConfig::default())?.total)),
        &[r],
        1e-6,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn multitask_gradient_wrt_weights() {
    // Zero-initialized biases let an all-dead subsampling frame feed a
    // constant vector into layer norm, where the loss is barely
    // differentiable. Jitter every weight to check at a generic point.
    let mut m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * { let z: f64 = StandardNormal.sample(&mut rng); z });
    }
    let m = m;
    let x = features(16, 4, 8);
    let y = [3usize, 2];
    let cfg = MultitaskConfig::default();
    let mut f = Forward::with_graph(&m, Graph::new(), true);
    let l = f.multitask_loss(&x, &y, None, &cfg).unwrap().total;
    f.graph.backward(l).unwrap();
    let grads = f.weight_grads();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (pid, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("every weight reaches the loss");
        // A few entries per tensor keep the check fast.
        for i in (0..g.len()).step_by((g.len() / 3).max(1)) {
            let mut mp = m.clone();
            mp.params.tensors_mut()[pid].data_mut()[i] += eps;
            let plus = mp.multitask_loss(&x, &y, None, &cfg).unwrap().total;
            mp.params.tensors_mut()[pid].data_mut()[i] -= 2.0 * eps;
            let minus = mp.multitask_loss(&x, &y, None, &cfg).unwrap().total;
            let numeric = (plus - minus) / (2.0 * eps);
            let an = g.data()[i];
            worst = worst.max((an - numeric).abs() / (an.abs() + eps));
        }
    }
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn kl_examples() {
    let p = PriorSpec::<f64>::standard(1);
    let q = VariationalPosterior { mu: Tensor::vector(vec![1.0]), log_sigma: Tensor::vector(vec![0.0]) };
    assert!((kl_gaussians(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    let p = PriorSpec::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let q = VariationalPosterior { mu: Tensor::vector(vec![0.3, -1.0]), log_sigma: Tensor::vector(vec![0.5f64.ln(), 2.0f64.ln()]) };
    assert!(kl_gaussians(&q, &p).unwrap().abs() < 1e-12);
}

#[test]
fn kl_dimension_mismatch() {
    let q = VariationalPosterior::<f64>::new(3, 0.0);
    assert!(matches!(kl_gaussians(&q, &PriorSpec::standard(2)), Err(Error::DimMismatch { .. })));
    assert!(PriorSpec::new(vec![0.0], vec![0.0]).is_err());
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    for _ in 0..5 {
        let mu: f64 = StandardNormal.sample(&mut rng);
        let ls: f64 = 0.5 * { let z: f64 = StandardNormal.sample(&mut rng); z };
        let mr: f64 = StandardNormal.sample(&mut rng);
        let sr: f64 = (0.5 * { let z: f64 = StandardNormal.sample(&mut rng); z }).exp();
        let q = VariationalPosterior { mu: Tensor::vector(vec![mu]), log_sigma: Tensor::vector(vec![ls]) };
        let p = PriorSpec::new(vec![mr], vec![sr]).unwrap();
        let exact = kl_gaussians(&q, &p).unwrap();
        let s = ls.exp();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let r = mu + s * z;
                let lq = -0.5 * z * z - ls;
                let lp = -0.5 * ((r - mr) / sr).powi(2) - sr.ln();
                lq - lp
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * se + 1e-12, "exact {exact} mc {mean} se {se}");
    }
}

#[test]
fn kl_graph_matches_closed_form_and_gradients() {
    let p = PriorSpec::new(vec![0.2, -0.5, 1.0], vec![1.0, 0.7, 1.5]).unwrap();
    let q = VariationalPosterior { mu: Tensor::vector(vec![0.4, 0.1, -0.3]), log_sigma: Tensor::vector(vec![-0.2, 0.3, -1.0]) };
    let mut g = Graph::new();
    let (mu, ls) = (g.param(q.mu.clone()), g.param(q.log_sigma.clone()));
    let kl = kl_graph(&mut g, mu, ls, &p).unwrap();
    assert!((g.value(kl).data()[0] - kl_gaussians::<f64>(&q, &p).unwrap()).abs() < 1e-12);
    let err = check_inputs(Graph::new, |g, vs| Ok(kl_graph(g, vs[0], vs[1], &p).unwrap()), &[q.mu.clone(), q.log_sigma.clone()], 1e-6);
    assert!(err < 1e-6, "relative error {err}");
}

fn set() -> Vec<(Tensor<f64>, Vec<usize>)> {
    vec![(features(16, 4, 20), vec![2, 3]), (features(12, 4, 21), vec![4])]
}

fn eps_stream(d: usize, n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::vector((0..d).map(|_| StandardNormal.sample(&mut rng)).collect())).collect()
}

#[test]
fn degenerate_posterior_reduces_to_deterministic_loss() {
    let m = model();
    let data = set();
    let utts: Vec<(EncoderInput<f64>, &[usize])> = data.iter().map(|(x, y)| (x.into(), y.as_slice())).collect();
    let d = m.d_lhuc();
    let mu = Tensor::vector((0..d).map(|i| 0.1 * i as f64 - 0.3).collect());
    let q = VariationalPosterior { mu: mu.clone(), log_sigma: Tensor::full(vec![d], -30.0) };
    let cfg = MultitaskConfig::default();
    let ev = variational_loss(&m, &utts, &q, &PriorSpec::standard(d), &eps_stream(d, 1, 3), &cfg).unwrap();
    let sp = SpeakerParams { speaker_id: "s".into(), r: mu };
    let det: f64 = data.iter().map(|(x, y)| m.multitask_loss(x, y, Some(&sp), &cfg).unwrap().total).sum();
    assert!((ev.l1 - det).abs() < 1e-6, "{} vs {det}", ev.l1);
    assert!((ev.loss - ev.l1 - ev.kl).abs() < 1e-12);
}

#[test]
fn monte_carlo_average_is_linear_in_samples() {
    let m = model();
    let data = set();
    let utts: Vec<(EncoderInput<f64>, &[usize])> = data.iter().map(|(x, y)| (x.into(), y.as_slice())).collect();
    let d = m.d_lhuc();
    let q = VariationalPosterior { mu: Tensor::full(vec![d], 0.1), log_sigma: Tensor::full(vec![d], -1.0) };
    let p = PriorSpec::standard(d);
    let cfg = MultitaskConfig::default();
    let eps = eps_stream(d, 4, 9);
    let joint = variational_loss(&m, &utts, &q, &p, &eps, &cfg).unwrap();
    let singles: Vec<_> = eps.iter().map(|e| variational_loss(&m, &utts, &q, &p, std::slice::from_ref(e), &cfg).unwrap()).collect();
    let mean_l1 = singles.iter().map(|s| s.l1).sum::<f64>() / 4.0;
    assert!((joint.l1 - mean_l1).abs() < 1e-12);
    for i in 0..d {
        // Every evaluation carries the KL gradient once, so plain averaging holds.
        let gm = singles.iter().map(|s| s.grad_mu.data()[i]).sum::<f64>() / 4.0;
        assert!((joint.grad_mu.data()[i] - gm).abs() < 1e-10);
    }
    assert!(variational_loss(&m, &utts, &q, &p, &[], &cfg).is_err());
    assert!(matches!(variational_loss(&m, &[], &q, &p, &eps, &cfg), Err(Error::EmptyAdaptationSet)));
}

#[test]
fn variational_gradients_match_finite_differences() {
    let m = model();
    let data = set();
    let utts: Vec<(EncoderInput<f64>, &[usize])> = data.iter().map(|(x, y)| (x.into(), y.as_slice())).collect();
    let d = m.d_lhuc();
    let p = PriorSpec::standard(d);
    let cfg = MultitaskConfig::default();
    let eps = eps_stream(d, 2, 5);
    let q = VariationalPosterior {
        mu: Tensor::vector((0..d).map(|i| 0.2 - 0.05 * i as f64).collect()),
        log_sigma: Tensor::vector((0..d).map(|i| -0.5 - 0.1 * i as f64).collect()),
    };
    let ev = variational_loss(&m, &utts, &q, &p, &eps, &cfg).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        for i in 0..d {
            let bump = |delta: f64| {
                let mut qq = q.clone();
                let t = if which == 0 { &mut qq.mu } else { &mut qq.log_sigma };
                t.data_mut()[i] += delta;
                variational_loss(&m, &utts, &qq, &p, &eps, &cfg).unwrap().loss
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let an = if which == 0 { ev.grad_mu.data()[i] } else { ev.grad_log_sigma.data()[i] };
            worst = worst.max((an - numeric).abs() / (an.abs() + h));
        }
    }
    assert!(worst < 1e-4, "relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        mu in prop::collection::vec(-3.0f64..3.0, 3),
        ls in prop::collection::vec(-2.0f64..2.0, 3),
        mr in prop::collection::vec(-3.0f64..3.0, 3),
        sr in prop::collection::vec(0.1f64..3.0, 3),
    ) {
        let p = PriorSpec::new(mr.clone(), sr.clone()).unwrap();
        let q = VariationalPosterior { mu: Tensor::vector(mu.clone()), log_sigma: Tensor::vector(ls.clone()) };
        let kl = kl_gaussians(&q, &p).unwrap();
        prop_assert!(kl >= 0.0);
        let same = mu.iter().zip(&mr).all(|(a, b)| (a - b).abs() < 1e-9) && ls.iter().zip(&sr).all(|(a, b)| (a - b.ln()).abs() < 1e-9);
        if !same {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn ctc_loss_is_a_nonnegative_finite_nll(seed in 0u64..10_000, frames in 4usize..9, scale in 0.1f64..50.0) {
        let mut logits = features(frames, 5, seed);
        logits.data_mut().iter_mut().for_each(|x| *x *= scale);
        let l = ctc_loss_value(&log_softmax_rows(&logits), &[1, 3, 3], 0).unwrap();
        prop_assert!(!l.is_nan());
        prop_assert!(l >= -1e-9);
    }

    /// Exact convex combination for every lambda, hence strictly increasing
    /// in the attention term whenever lambda < 1.
    #[test]
    fn multitask_combination_holds_for_any_lambda(lambda in 0.0f64..1.0, seed in 0u64..100) {
        let m = model();
        let x = features(16, 4, seed);
        let v = m.multitask_loss(&x, &[3, 1], None, &MultitaskConfig { lambda }).unwrap();
        let (a, c) = (v.att.unwrap(), v.ctc.unwrap());
        prop_assert!(((1.0 - lambda) * a + lambda * c - v.total).abs() < 1e-12);
    }
}
