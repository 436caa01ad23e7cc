use lhuc_autograd::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{derive_seed, AdaptConfig, AdaptLog, AdaptLogRow, AdaptationSet};
use crate::error::{Error, Result};
use crate::model::{ConformerModel, EncoderOutput, Forward, Prepared, SpeakerParams};
use crate::objectives::{ctc_min_frames, variational_loss, MultitaskConfig, VariationalPosterior};

/// Loss above this multiple of the initial loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Front-end outputs and targets of the usable utterances: non-empty
/// supervision that the CTC branch can align.
fn prepare_set<T: Scalar>(model: &ConformerModel<T>, set: &AdaptationSet<T>, mt: &MultitaskConfig) -> Result<Vec<(Prepared<T>, Vec<usize>)>> {
    let mut out = Vec::new();
    for u in &set.utterances {
        if u.supervision.is_empty() {
            continue;
        }
        let frames = model.config.subsampled_len(u.features.shape()[0]);
        if mt.lambda > 0.0 && ctc_min_frames(&u.supervision) > frames {
            continue;
        }
        out.push((model.prepare(&u.features)?, u.supervision.clone()));
    }
    if out.is_empty() {
        return Err(Error::EmptyAdaptationSet);
    }
    Ok(out)
}

pub(super) fn check_divergence(step: usize, loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::DivergedLoss { step, loss, initial });
    }
    Ok(())
}

/// Summed multitask loss over `data` at `r`, and its gradient w.r.t. `r`.
pub(crate) fn loss_and_grad<T: Scalar>(model: &ConformerModel<T>, data: &[(Prepared<T>, Vec<usize>)], r: &Tensor<T>, mt: &MultitaskConfig) -> Result<(T, Tensor<T>)> {
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(r.shape().to_vec());
    for (p, y) in data {
        let mut f = Forward::eval(model);
        let rv = f.graph.param(r.clone());
        let l = f.multitask_loss(p, y, Some(rv), mt)?.total;
        f.graph.backward(l)?;
        loss = loss + f.graph.value(l).data()[0];
        if let Some(g) = f.graph.grad(rv) {
            grad.add_assign(g);
        }
    }
    Ok((loss, grad))
}

/// Gradient descent on `r` from zero with frozen shared weights.
///
/// Fails with [`Error::DivergedLoss`] when the loss turns non-finite or
/// exceeds ten times its initial value; callers fall back to `r = 0`.
pub fn estimate_lhuc<T: Scalar>(model: &ConformerModel<T>, set: &AdaptationSet<T>, cfg: &AdaptConfig) -> Result<(SpeakerParams<T>, AdaptLog)> {
    cfg.validate()?;
    let data = prepare_set(model, set, &cfg.multitask)?;
    let mut params = SpeakerParams::identity(set.speaker_id.clone(), model.d_lhuc());
    let mut log = AdaptLog { speaker_id: set.speaker_id.clone(), ..Default::default() };
    let lr = T::lit(cfg.learning_rate);
    let mut initial = None;
    for step in 0..cfg.steps {
        let (loss, grad) = loss_and_grad(model, &data, &params.r, &cfg.multitask)?;
        let l = loss.as_f64();
        let init = *initial.get_or_insert(l);
        check_divergence(step, l, init)?;
        log.rows.push(AdaptLogRow { step, loss: l, kl: 0.0, lr: cfg.learning_rate });
        crate::optim::sgd_step(&mut params.r, &grad, lr);
    }
    if !params.r.is_finite() {
        return Err(Error::DivergedLoss { step: cfg.steps, loss: f64::NAN, initial: initial.unwrap_or(f64::NAN) });
    }
    Ok((params, log))
}

/// Standard-normal draws for one step.
pub(crate) fn draw_eps<T: Scalar>(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<Tensor<T>> {
    (0..n)
        .map(|_| {
            let v: Vec<T> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z)
                })
                .collect();
            Tensor::vector(v)
        })
        .collect()
}

/// Gradient descent on `(mu, log_sigma)` against the variational bound, with
/// `mc_samples` fresh draws per step from a stream keyed by the speaker id.
pub fn bayes_adapt<T: Scalar>(model: &ConformerModel<T>, set: &AdaptationSet<T>, cfg: &AdaptConfig) -> Result<(VariationalPosterior<T>, AdaptLog)> {
    cfg.validate()?;
    let data = prepare_set(model, set, &cfg.multitask)?;
    let d = model.d_lhuc();
    let prior = cfg.prior::<T>(d);
    let mut q = VariationalPosterior::new(d, T::lit(cfg.log_sigma_init));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &set.speaker_id));
    let mut log = AdaptLog { speaker_id: set.speaker_id.clone(), ..Default::default() };
    let lr = T::lit(cfg.learning_rate);
    let pairs: Vec<_> = data.iter().map(|(p, y)| (p.into(), y.as_slice())).collect();
    let mut initial = None;
    for step in 0..cfg.steps {
        let eps = draw_eps(&mut rng, d, cfg.mc_samples);
        let ev = variational_loss(model, &pairs, &q, &prior, &eps, &cfg.multitask)?;
        let l = ev.loss.as_f64();
        let init = *initial.get_or_insert(l);
        check_divergence(step, l, init)?;
        log.rows.push(AdaptLogRow { step, loss: l, kl: ev.kl.as_f64(), lr: cfg.learning_rate });
        crate::optim::sgd_step(&mut q.mu, &ev.grad_mu, lr);
        crate::optim::sgd_step(&mut q.log_sigma, &ev.grad_log_sigma, lr);
    }
    if !q.mu.is_finite() || !q.log_sigma.is_finite() {
        return Err(Error::DivergedLoss { step: cfg.steps, loss: f64::NAN, initial: initial.unwrap_or(f64::NAN) });
    }
    Ok((q, log))
}

/// Test-time encoding under a posterior: the mean only, never a sample.
pub fn predict_with_posterior<T: Scalar>(model: &ConformerModel<T>, q: &VariationalPosterior<T>, speaker_id: &str, features: &Tensor<T>) -> Result<EncoderOutput<T>> {
    model.encode(features, Some(&q.mean_params(speaker_id)))
}
