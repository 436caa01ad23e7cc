//! Training losses: attention cross-entropy, CTC, their interpolation and the
//! variational bound for Bayesian LHUC.

mod ctc;
mod variational;

use lhuc_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use ctc::{ctc_loss, ctc_loss_value, ctc_min_frames};
pub use variational::{kl_gaussians, kl_graph, variational_loss, PriorSpec, VariationalEval, VariationalPosterior};

use crate::error::{Error, Result};
use crate::model::{ConformerModel, EncoderInput, Forward, ModelConfig, SpeakerParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultitaskConfig {
    /// CTC weight; the attention branch gets `1 - lambda`.
    pub lambda: f64,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        Self { lambda: 0.2 }
    }
}

impl MultitaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Decoder input `[sos] + y` and output `y + [eos]` for teacher forcing.
pub fn teacher_forcing(config: &ModelConfig, target: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if let Some(&t) = target.iter().find(|&&t| !config.lexical_tokens().contains(&t)) {
        return Err(Error::BadToken(t));
    }
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(config.sos());
    input.extend_from_slice(target);
    let mut output = target.to_vec();
    output.push(config.eos());
    Ok((input, output))
}

/// `-sum_i log_probs[i, ids[i]]`, recorded on the graph.
pub fn pick_nll<T: Scalar>(g: &mut Graph<T>, log_probs: Var, ids: &[usize]) -> Result<Var> {
    let shape = g.value(log_probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != ids.len() {
        return Err(Error::DimMismatch { expected: ids.len(), got: shape[0] });
    }
    let v = shape[1];
    let mut onehot = Tensor::zeros(shape);
    for (i, &t) in ids.iter().enumerate() {
        if t >= v {
            return Err(Error::BadToken(t));
        }
        onehot.data_mut()[i * v + t] = T::one();
    }
    let m = g.constant(onehot);
    let picked = g.mul(log_probs, m)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -T::one())?)
}

/// Plain-value form of [`pick_nll`].
pub fn attention_nll<T: Scalar>(log_probs: &Tensor<T>, outputs: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let l = pick_nll(&mut g, lp, outputs)?;
    Ok(g.value(l).item()?)
}

/// Per-branch loss handles of one utterance.
#[derive(Debug, Clone, Copy)]
pub struct MultitaskVars {
    pub total: Var,
    pub att: Option<Var>,
    pub ctc: Option<Var>,
}

/// Plain values of [`MultitaskVars`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultitaskValue<T> {
    pub total: T,
    pub att: Option<T>,
    pub ctc: Option<T>,
}

impl<T: Scalar> Forward<'_, T> {
    /// Teacher-forced `-log p_a(Y|X)` over `y + [eos]`.
    pub fn attention_loss(&mut self, enc: Var, target: &[usize]) -> Result<Var> {
        let (input, output) = teacher_forcing(&self.model.config, target)?;
        let out = self.decode(enc, &input)?;
        pick_nll(&mut self.graph, out.log_probs, &output)
    }

    /// `(1 - lambda) L_att + lambda L_ctc`. A branch with zero weight is not
    /// evaluated.
    pub fn multitask_loss<'a>(&mut self, input: impl Into<EncoderInput<'a, T>>, target: &[usize], r: Option<Var>, cfg: &MultitaskConfig) -> Result<MultitaskVars> {
        cfg.validate()?;
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let enc = self.encode(input, r)?;
        let lambda = T::lit(cfg.lambda);
        let att = if cfg.lambda < 1.0 { Some(self.attention_loss(enc, target)?) } else { None };
        let ctc = if cfg.lambda > 0.0 {
            let lp = self.ctc_log_probs(enc)?;
            Some(ctc_loss(&mut self.graph, lp, target, self.model.config.blank())?)
        } else {
            None
        };
        let total = match (att, ctc) {
            (Some(a), Some(c)) => {
                let a = self.graph.scale(a, T::one() - lambda)?;
                let c = self.graph.scale(c, lambda)?;
                self.graph.add(a, c)?
            }
            (Some(a), None) => a,
            (None, Some(c)) => c,
            (None, None) => unreachable!("lambda lies in [0, 1]"),
        };
        Ok(MultitaskVars { total, att, ctc })
    }
}

impl<T: Scalar> ConformerModel<T> {
    /// Evaluation-mode teacher-forced attention loss.
    pub fn attention_loss<'a>(&self, input: impl Into<EncoderInput<'a, T>>, target: &[usize], speaker: Option<&SpeakerParams<T>>) -> Result<T> {
        let mut f = Forward::eval(self);
        let r = speaker.map(|s| f.graph.constant(s.r.clone()));
        let enc = f.encode(input, r)?;
        let l = f.attention_loss(enc, target)?;
        Ok(f.graph.value(l).item()?)
    }

    /// Evaluation-mode multitask loss.
    pub fn multitask_loss<'a>(
        &self,
        input: impl Into<EncoderInput<'a, T>>,
        target: &[usize],
        speaker: Option<&SpeakerParams<T>>,
        cfg: &MultitaskConfig,
    ) -> Result<MultitaskValue<T>> {
        let mut f = Forward::eval(self);
        let r = speaker.map(|s| f.graph.constant(s.r.clone()));
        let v = f.multitask_loss(input, target, r, cfg)?;
        let val = |x: Var| f.graph.value(x).data()[0];
        Ok(MultitaskValue { total: val(v.total), att: v.att.map(val), ctc: v.ctc.map(val) })
    }
}

#[cfg(test)]
mod tests;
