use std::collections::BTreeMap;

use lhuc_autograd::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::estimate::loss_and_grad;
use crate::error::{Error, Result};
use crate::model::{ConformerModel, Forward, SpeakerParams};
use crate::objectives::{ctc_min_frames, MultitaskConfig};
use crate::optim::{sgd_step, Adam, NoamSchedule};

#[derive(Debug, Clone, Copy)]
pub struct TrainUtterance<'a, T> {
    pub speaker_id: &'a str,
    pub features: &'a Tensor<T>,
    pub target: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Utterances per optimizer step; their losses are summed.
    pub batch_size: usize,
    pub noam: NoamSchedule,
    pub multitask: MultitaskConfig,
    /// Final weights are the mean of this many last-epoch snapshots.
    pub average_last: usize,
    /// Global gradient-norm clip per update; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// SAT: gradient steps on each training speaker's `r` per epoch.
    pub speaker_steps: usize,
    pub speaker_lr: f64,
    /// SAT with every `r` held at zero (reproduces SI training).
    pub freeze_speakers: bool,
    /// SAT: probability that an utterance is presented with `r = 0` in the
    /// weight update, which keeps the identity transform usable as the
    /// starting point for unseen speakers.
    pub si_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            noam: NoamSchedule::default(),
            multitask: MultitaskConfig::default(),
            average_last: 3,
            grad_clip: Some(5.0),
            speaker_steps: 2,
            speaker_lr: 0.1,
            freeze_speakers: false,
            si_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.si_fraction) {
            return Err(Error::Config("si_fraction must lie in [0, 1]".into()));
        }
        self.multitask.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ConformerModel<T>,
    /// Training-speaker LHUC vectors (empty for SI training).
    pub speakers: BTreeMap<String, SpeakerParams<T>>,
    /// Mean per-utterance training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Speaker-independent training: Adam under the Noam schedule, dropout on,
/// averaged over the last epochs.
pub fn train_si<T: Scalar>(model: ConformerModel<T>, data: &[TrainUtterance<'_, T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_loop(model, data, cfg, false)
}

/// Speaker-adaptive training: every epoch updates the shared weights with
/// each speaker's `r` held fixed, then each speaker's `r` with the shared
/// weights held fixed.
pub fn sat_train<T: Scalar>(model: ConformerModel<T>, data: &[TrainUtterance<'_, T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let speakers: std::collections::BTreeSet<&str> = data.iter().map(|u| u.speaker_id).collect();
    if speakers.len() < 2 {
        return Err(Error::Config("speaker-adaptive training needs at least two speakers".into()));
    }
    train_loop(model, data, cfg, true)
}

fn train_loop<T: Scalar>(mut model: ConformerModel<T>, data: &[TrainUtterance<'_, T>], cfg: &TrainConfig, sat: bool) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let data: Vec<TrainUtterance<'_, T>> = data
        .iter()
        .copied()
        .filter(|u| !u.target.is_empty() && (cfg.multitask.lambda == 0.0 || ctc_min_frames(u.target) <= model.config.subsampled_len(u.features.shape()[0])))
        .collect();
    if data.is_empty() {
        return Err(Error::EmptyAdaptationSet);
    }
    let d = model.d_lhuc();
    let mut speakers: BTreeMap<String, SpeakerParams<T>> = BTreeMap::new();
    if sat {
        for u in &data {
            speakers.entry(u.speaker_id.to_string()).or_insert_with(|| SpeakerParams::identity(u.speaker_id, d));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params.tensors());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut snapshots: Vec<Vec<Tensor<T>>> = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut update = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
            for &i in batch {
                let u = &data[i];
                let mut f = Forward::train(&model, derive_seed(cfg.seed, &format!("{epoch}:{i}")), true);
                let r = if sat {
                    // Hash-derived so the shuffle stream is untouched.
                    let coin = (derive_seed(cfg.seed, &format!("si:{epoch}:{i}")) >> 11) as f64 / (1u64 << 53) as f64;
                    let r = if coin < cfg.si_fraction { Tensor::zeros(vec![d]) } else { speakers[u.speaker_id].r.clone() };
                    Some(f.graph.constant(r))
                } else {
                    None
                };
                let loss = f.multitask_loss(u.features, u.target, r, &cfg.multitask)?.total;
                f.graph.backward(loss)?;
                total += f.graph.value(loss).data()[0].as_f64();
                for (acc, g) in grads.iter_mut().zip(f.weight_grads()) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut grads, T::lit(max));
            }
            update += 1;
            opt.step(model.params.tensors_mut(), &grads, cfg.noam.lr(update));
        }
        if !total.is_finite() {
            return Err(Error::DivergedLoss { step: epoch, loss: total, initial: epoch_losses.first().copied().unwrap_or(f64::NAN) });
        }
        epoch_losses.push(total / data.len() as f64);

        if sat && !cfg.freeze_speakers && cfg.speaker_steps > 0 {
            let lr = T::lit(cfg.speaker_lr);
            for (id, params) in speakers.iter_mut() {
                let prepared: Vec<_> = data
                    .iter()
                    .filter(|u| u.speaker_id == id)
                    .map(|u| Ok((model.prepare(u.features)?, u.target.to_vec())))
                    .collect::<Result<_>>()?;
                for _ in 0..cfg.speaker_steps {
                    let (_, grad) = loss_and_grad(&model, &prepared, &params.r, &cfg.multitask)?;
                    sgd_step(&mut params.r, &grad, lr);
                }
            }
        }
        if epoch + cfg.average_last.max(1) >= cfg.epochs {
            snapshots.push(model.params.tensors().to_vec());
        }
    }

    if snapshots.len() > 1 {
        let inv = T::one() / T::lit(snapshots.len() as f64);
        for (i, p) in model.params.tensors_mut().iter_mut().enumerate() {
            let mut acc = Tensor::zeros(p.shape().to_vec());
            for s in &snapshots {
                acc.add_assign(&s[i]);
            }
            *p = acc.map(|v| v * inv);
        }
    }
    Ok(TrainOutcome { model, speakers, epoch_losses })
}

/// Rescales all gradients together so their joint L2 norm is at most `max`.
fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max: T) {
    let sq: T = grads.iter().flatten().flat_map(|g| g.data().iter().map(|&v| v * v)).sum();
    let norm = sq.sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|v| v * k);
        }
    }
}
