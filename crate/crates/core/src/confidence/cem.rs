use lhuc_autograd::{Graph, Tensor, Var, BATCH_NORM_EPS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ConfidenceRecord;
use crate::decoding::auc;
use crate::error::{Error, Result};
use crate::model::checkpoint::Bundle;
use crate::model::ParamStore;
use crate::objectives::pick_nll;
use crate::optim::Adam;

/// Which top-k block feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopKFeature {
    Probs,
    /// Pre-softmax outputs of the top-k tokens.
    #[default]
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub hidden: usize,
    /// Feed-forward layers before the output unit; all but the first are
    /// residual.
    pub layers: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of utterances held out for validation.
    pub val_fraction: f64,
    /// Keep the epoch with the lowest validation cross-entropy instead of
    /// the last one.
    pub keep_best: bool,
    pub top_k_feature: TopKFeature,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            dropout: 0.1,
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            val_fraction: 0.2,
            keep_best: true,
            top_k_feature: TopKFeature::Logits,
            seed: 0,
        }
    }
}

const BN_MOMENTUM: f64 = 0.1;
/// Output logits are clamped so the sigmoid stays strictly inside (0, 1).
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
}

/// Residual feed-forward binary classifier over token features.
#[derive(Debug, Clone, PartialEq)]
pub struct CemModel {
    pub config: CemConfig,
    pub input_dim: usize,
    params: ParamStore<f64>,
    layers: Vec<Layer>,
    out_w: usize,
    out_b: usize,
    /// Input standardization from the training split.
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    /// Batch-norm running statistics, used at scoring time.
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    /// AUC on the held-out utterances, when both classes were present.
    pub val_auc: Option<f64>,
    /// Mean training BCE of the last epoch.
    pub final_train_loss: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("init shape")
}

impl CemModel {
    fn init(config: &CemConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden;
        let mut s = ParamStore::default();
        let mut layers = Vec::new();
        for l in 0..config.layers.max(1) {
            let fan_in = if l == 0 { input_dim } else { h };
            let bound = (6.0 / (fan_in + h) as f64).sqrt();
            layers.push(Layer {
                w: s.add(format!("cem.{l}.weight"), uniform(rng, &[fan_in, h], bound)).0,
                b: s.add(format!("cem.{l}.bias"), Tensor::zeros(vec![h])).0,
                gamma: s.add(format!("cem.{l}.bn_gamma"), Tensor::full(vec![h], 1.0)).0,
                beta: s.add(format!("cem.{l}.bn_beta"), Tensor::zeros(vec![h])).0,
            });
        }
        let bound = (6.0 / (h + 1) as f64).sqrt();
        let out_w = s.add("cem.out.weight", uniform(rng, &[h, 1], bound)).0;
        let out_b = s.add("cem.out.bias", Tensor::zeros(vec![1])).0;
        let n = layers.len();
        Self {
            config: config.clone(),
            input_dim,
            params: s,
            layers,
            out_w,
            out_b,
            feat_mean: vec![0.0; input_dim],
            feat_std: vec![1.0; input_dim],
            running_mean: vec![vec![0.0; h]; n],
            running_var: vec![vec![1.0; h]; n],
            val_auc: None,
            final_train_loss: f64::NAN,
        }
    }

    fn standardize<'a>(&'a self, f: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        f.iter().zip(self.feat_mean.iter().zip(&self.feat_std)).map(|(x, (m, s))| (x - m) / s)
    }

    fn features_of(&self, r: &ConfidenceRecord) -> Result<Vec<f64>> {
        let f = r.features(self.config.top_k_feature);
        if f.len() != self.input_dim {
            return Err(Error::DimMismatch { expected: self.input_dim, got: f.len() });
        }
        Ok(f)
    }

    /// Training-mode logits `[batch, 1]` and the batch statistics per layer.
    fn forward_train(&self, g: &mut Graph<f64>, x: Var, bound: &[Var]) -> Result<(Var, Vec<lhuc_autograd::BatchStats<f64>>)> {
        let mut h = x;
        let mut stats = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let y = g.matmul(h, bound[layer.w])?;
            let y = g.add(y, bound[layer.b])?;
            let (y, st) = g.batch_norm(y)?;
            stats.push(st);
            let y = g.mul(y, bound[layer.gamma])?;
            let y = g.add(y, bound[layer.beta])?;
            let y = g.relu(y)?;
            let y = g.dropout(y, self.config.dropout)?;
            h = if l == 0 { y } else { g.add(h, y)? };
        }
        let z = g.matmul(h, bound[self.out_w])?;
        Ok((g.add(z, bound[self.out_b])?, stats))
    }

    /// Pre-sigmoid output in evaluation mode.
    fn logit(&self, features: &[f64]) -> f64 {
        let p = self.params.tensors();
        let h_dim = self.config.hidden;
        let mut h: Vec<f64> = self.standardize(features).collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &p[layer.w];
            let fan_in = w.shape()[0];
            let mut y = p[layer.b].data().to_vec();
            for (i, &xi) in h.iter().enumerate().take(fan_in) {
                let row = &w.data()[i * h_dim..(i + 1) * h_dim];
                for (yj, wij) in y.iter_mut().zip(row) {
                    *yj += xi * wij;
                }
            }
            for (j, yj) in y.iter_mut().enumerate() {
                let n = (*yj - self.running_mean[l][j]) / (self.running_var[l][j] + BATCH_NORM_EPS).sqrt();
                *yj = (n * p[layer.gamma].data()[j] + p[layer.beta].data()[j]).max(0.0);
            }
            h = if l == 0 { y } else { h.iter().zip(&y).map(|(a, b)| a + b).collect() };
        }
        let z: f64 = h.iter().zip(p[self.out_w].data()).map(|(a, b)| a * b).sum::<f64>() + p[self.out_b].data()[0];
        z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }

    /// Smoothed confidence in (0, 1).
    pub fn score(&self, record: &ConfidenceRecord) -> Result<f64> {
        let f = self.features_of(record)?;
        Ok(1.0 / (1.0 + (-self.logit(&f)).exp()))
    }

    fn mean_bce(&self, records: &[&ConfidenceRecord]) -> Result<f64> {
        let mut total = 0.0;
        for r in records {
            let z = self.logit(&self.features_of(r)?);
            // -log sigmoid(+-z), computed stably.
            let m = if r.label == Some(true) { -z } else { z };
            total += m.max(0.0) + (-m.abs()).exp().ln_1p();
        }
        Ok(total / records.len() as f64)
    }

    /// Fills `smoothed` on every record.
    pub fn score_all(&self, records: &mut [ConfidenceRecord]) -> Result<()> {
        for r in records.iter_mut() {
            r.smoothed = Some(self.score(r)?);
        }
        Ok(())
    }

    /// Binary cross-entropy training on labelled records. Utterances are
    /// split into training and validation parts; the validation AUC is
    /// recorded on the model.
    pub fn train(records: &[ConfidenceRecord], config: &CemConfig) -> Result<Self> {
        let labelled: Vec<&ConfidenceRecord> = records.iter().filter(|r| r.label.is_some()).collect();
        let pos = labelled.iter().filter(|r| r.label == Some(true)).count();
        if pos == 0 || pos == labelled.len() {
            return Err(Error::SingleClassDump);
        }
        let input_dim = labelled[0].features(config.top_k_feature).len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Self::init(config, input_dim, &mut rng);

        let mut utts: Vec<&str> = labelled.iter().map(|r| r.utterance_id.as_str()).collect();
        utts.sort_unstable();
        utts.dedup();
        utts.shuffle(&mut rng);
        let n_val = ((utts.len() as f64) * config.val_fraction).round() as usize;
        let n_val = if utts.len() > 1 { n_val.min(utts.len() - 1) } else { 0 };
        let val_set: std::collections::HashSet<&str> = utts[..n_val].iter().copied().collect();
        let (val, train): (Vec<&ConfidenceRecord>, Vec<&ConfidenceRecord>) =
            labelled.iter().partition(|r| val_set.contains(r.utterance_id.as_str()));
        let train = if train.iter().any(|r| r.label == Some(true)) && train.iter().any(|r| r.label == Some(false)) {
            train
        } else {
            labelled.clone()
        };

        let xs: Vec<Vec<f64>> = train.iter().map(|r| model.features_of(r)).collect::<Result<_>>()?;
        let ys: Vec<bool> = train.iter().map(|r| r.label == Some(true)).collect();
        let n = xs.len() as f64;
        for j in 0..input_dim {
            let m = xs.iter().map(|x| x[j]).sum::<f64>() / n;
            let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n;
            model.feat_mean[j] = m;
            model.feat_std[j] = if v > 1e-12 { v.sqrt() } else { 1.0 };
        }
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| model.standardize(x).collect()).collect();

        let mut opt = Adam::new(model.params.tensors());
        opt.beta2 = 0.999;
        opt.eps = 1e-8;
        let bs = config.batch_size.max(2);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut step_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut best: Option<(f64, Self)> = None;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(bs) {
                // A single-row batch has no variance to normalize by.
                if chunk.len() < 2 {
                    continue;
                }
                step_seed = step_seed.wrapping_add(1);
                let mut g = Graph::training(step_seed);
                let bound: Vec<Var> = model.params.tensors().iter().map(|t| g.param(t.clone())).collect();
                let data: Vec<f64> = chunk.iter().flat_map(|&i| xs[i].iter().copied()).collect();
                let x = g.constant(Tensor::new(vec![chunk.len(), input_dim], data)?);
                let (z, stats) = model.forward_train(&mut g, x, &bound)?;
                let zero = g.constant(Tensor::zeros(vec![chunk.len(), 1]));
                let pair = g.concat(&[z, zero], 1)?;
                let lp = g.log_softmax(pair)?;
                // Column 0 is log sigmoid(z), column 1 is log(1 - sigmoid(z)).
                let cols: Vec<usize> = chunk.iter().map(|&i| usize::from(!ys[i])).collect();
                let nll = pick_nll(&mut g, lp, &cols)?;
                let loss = g.scale(nll, 1.0 / chunk.len() as f64)?;
                g.backward(loss)?;
                epoch_loss += g.value(loss).data()[0] * chunk.len() as f64;
                seen += chunk.len();
                let grads: Vec<Option<Tensor<f64>>> = bound.iter().map(|&v| g.grad(v).cloned()).collect();
                opt.step(model.params.tensors_mut(), &grads, config.learning_rate);
                for (l, st) in stats.into_iter().enumerate() {
                    for j in 0..config.hidden {
                        let rm = &mut model.running_mean[l][j];
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * st.mean[j];
                        let rv = &mut model.running_var[l][j];
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * st.var[j];
                    }
                }
            }
            if seen > 0 {
                model.final_train_loss = epoch_loss / seen as f64;
            }
            if config.keep_best && !val.is_empty() {
                let loss = model.mean_bce(&val)?;
                if best.as_ref().map_or(true, |(b, _)| loss < *b) {
                    best = Some((loss, model.clone()));
                }
            }
        }
        if let Some((_, m)) = best {
            model = m;
        }

        if !val.is_empty() {
            let scores: Vec<f64> = val.iter().map(|r| model.score(r)).collect::<Result<_>>()?;
            let labels: Vec<bool> = val.iter().map(|r| r.label == Some(true)).collect();
            model.val_auc = auc(&scores, &labels);
        }
        Ok(model)
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut tensors: Vec<(String, Tensor<f64>)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.push(("cem.feat_mean".into(), Tensor::vector(self.feat_mean.clone())));
        tensors.push(("cem.feat_std".into(), Tensor::vector(self.feat_std.clone())));
        for l in 0..self.layers.len() {
            tensors.push((format!("cem.{l}.running_mean"), Tensor::vector(self.running_mean[l].clone())));
            tensors.push((format!("cem.{l}.running_var"), Tensor::vector(self.running_var[l].clone())));
        }
        let meta = serde_json::json!({
            "config": self.config,
            "input_dim": self.input_dim,
            "val_auc": self.val_auc,
            "final_train_loss": if self.final_train_loss.is_finite() { Some(self.final_train_loss) } else { None },
        });
        Bundle { kind: "cem".into(), meta, tensors }
    }

    pub fn from_bundle(mut b: Bundle) -> Result<Self> {
        b.expect_kind("cem")?;
        let fmt = |e: serde_json::Error| Error::Format(e.to_string());
        let config: CemConfig = serde_json::from_value(b.meta["config"].clone()).map_err(fmt)?;
        let input_dim: usize = serde_json::from_value(b.meta["input_dim"].clone()).map_err(fmt)?;
        let val_auc: Option<f64> = serde_json::from_value(b.meta["val_auc"].clone()).map_err(fmt)?;
        let loss: Option<f64> = serde_json::from_value(b.meta["final_train_loss"].clone()).map_err(fmt)?;
        let mut m = Self::init(&config, input_dim, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = b.take(name)?;
            if t.shape() != m.params.tensors()[i].shape() {
                return Err(Error::Format(format!("tensor {name} has the wrong shape")));
            }
            m.params.tensors_mut()[i] = t;
        }
        m.feat_mean = b.take("cem.feat_mean")?.into_data();
        m.feat_std = b.take("cem.feat_std")?.into_data();
        for l in 0..m.layers.len() {
            m.running_mean[l] = b.take(&format!("cem.{l}.running_mean"))?.into_data();
            m.running_var[l] = b.take(&format!("cem.{l}.running_var"))?.into_data();
        }
        m.val_auc = val_auc;
        m.final_train_loss = loss.unwrap_or(f64::NAN);
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bundle(Bundle::load(path)?)
    }
}
