//! Toy-scale Conformer encoder / Transformer decoder with an LHUC layer at
//! the convolution-subsampling output.

pub mod checkpoint;
mod config;
mod layers;
mod lhuc;
mod params;

use lhuc_autograd::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{LhucPlacement, ModelConfig, SUBSAMPLE_LAYERS};
pub use layers::{causal_mask, positional_encoding, Activation, ConvModule, Embedding, FeedForward, Forward, LayerNorm, Linear, MultiHeadAttention};
pub use lhuc::{apply_lhuc, lhuc_scale, SpeakerParams, SpeakerRecord};
pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use params::uniform;

const SUBSAMPLE_KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct Subsampling {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln_ff1: LayerNorm,
    pub ff1: FeedForward,
    pub ln_mha: LayerNorm,
    pub mha: MultiHeadAttention,
    pub ln_conv: LayerNorm,
    pub conv: ConvModule,
    pub ln_ff2: LayerNorm,
    pub ff2: FeedForward,
    pub ln_out: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_src: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub subsample: Subsampling,
    pub encoder: Vec<EncoderBlock>,
    pub ctc_out: Linear,
    pub embed: Embedding,
    pub decoder: Vec<DecoderBlock>,
    pub dec_ln: LayerNorm,
    pub dec_out: Linear,
}

/// Encoder states for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[frames', d_model]`
    pub states: Tensor<T>,
    pub frames: usize,
}

/// Evaluation-mode front-end output at the LHUC point. Independent of the
/// speaker parameters, so adaptation computes it once per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared<T>(pub Tensor<T>);

/// What the encoder starts from.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a, T> {
    Features(&'a Tensor<T>),
    Prepared(&'a Prepared<T>),
}

impl<'a, T> From<&'a Tensor<T>> for EncoderInput<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        EncoderInput::Features(t)
    }
}

impl<'a, T> From<&'a Prepared<T>> for EncoderInput<'a, T> {
    fn from(p: &'a Prepared<T>) -> Self {
        EncoderInput::Prepared(p)
    }
}

/// Decoder outputs at the last prefix position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub log_probs: Vec<T>,
    /// Pre-softmax output-layer values.
    pub logits: Vec<T>,
    /// Last decoder layer state (after the final layer norm).
    pub hidden: Vec<T>,
}

/// Teacher-forced decoder outputs, one row per input position.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub logits: Var,
    pub log_probs: Var,
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct ConformerModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> ConformerModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();
        let c = &config;
        let d = c.d_model;
        let ch = c.subsample_channels;
        let k = SUBSAMPLE_KERNEL;
        let flat = ch * c.subsampled_feat_dim();

        let subsample = if c.linear_probe {
            let mut w1 = Tensor::zeros(vec![ch, k, k, 1]);
            w1.data_mut()[(k / 2) * k + k / 2] = T::one();
            let mut w2 = Tensor::zeros(vec![ch, k, k, ch]);
            for o in 0..ch {
                w2.data_mut()[((o * k + k / 2) * k + k / 2) * ch + o] = T::one();
            }
            let mut pw = Tensor::zeros(vec![flat, d]);
            for i in 0..flat.min(d) {
                pw.data_mut()[i * d + i] = T::one();
            }
            Subsampling {
                conv1_w: s.add("subsample.conv1.weight", w1),
                conv1_b: s.add("subsample.conv1.bias", Tensor::zeros(vec![ch])),
                conv2_w: s.add("subsample.conv2.weight", w2),
                conv2_b: s.add("subsample.conv2.bias", Tensor::zeros(vec![ch])),
                proj: Linear {
                    w: s.add("subsample.proj.weight", pw),
                    b: s.add("subsample.proj.bias", Tensor::zeros(vec![d])),
                },
            }
        } else {
            let b1 = (6.0 / (k * k + ch * k * k) as f64).sqrt();
            let b2 = (6.0 / (2 * ch * k * k) as f64).sqrt();
            Subsampling {
                conv1_w: s.add("subsample.conv1.weight", uniform(&mut rng, &[ch, k, k, 1], b1)),
                conv1_b: s.add("subsample.conv1.bias", Tensor::zeros(vec![ch])),
                conv2_w: s.add("subsample.conv2.weight", uniform(&mut rng, &[ch, k, k, ch], b2)),
                conv2_b: s.add("subsample.conv2.bias", Tensor::zeros(vec![ch])),
                proj: Linear::new(&mut s, &mut rng, "subsample.proj", flat, d),
            }
        };

        let encoder = (0..c.num_encoder_blocks)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderBlock {
                    ln_ff1: LayerNorm::new(&mut s, &format!("{n}.norm_ff1"), d),
                    ff1: FeedForward::new(&mut s, &mut rng, &format!("{n}.ff1"), d, c.d_ffn, Activation::Swish),
                    ln_mha: LayerNorm::new(&mut s, &format!("{n}.norm_mha"), d),
                    mha: MultiHeadAttention::new(&mut s, &mut rng, &format!("{n}.mha"), d, c.num_heads),
                    ln_conv: LayerNorm::new(&mut s, &format!("{n}.norm_conv"), d),
                    conv: ConvModule::new(&mut s, &mut rng, &format!("{n}.conv"), d, c.conv_kernel),
                    ln_ff2: LayerNorm::new(&mut s, &format!("{n}.norm_ff2"), d),
                    ff2: FeedForward::new(&mut s, &mut rng, &format!("{n}.ff2"), d, c.d_ffn, Activation::Swish),
                    ln_out: LayerNorm::new(&mut s, &format!("{n}.norm_out"), d),
                }
            })
            .collect();
        // Output projections start small so an untrained model is near uniform.
        let ctc_out = Linear::scaled(&mut s, &mut rng, "ctc.out", d, c.vocab_size, 0.1);
        let embed = Embedding::new(&mut s, &mut rng, "decoder.embed", c.vocab_size, d);
        let decoder = (0..c.num_decoder_blocks)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderBlock {
                    ln_self: LayerNorm::new(&mut s, &format!("{n}.norm_self"), d),
                    self_attn: MultiHeadAttention::new(&mut s, &mut rng, &format!("{n}.self_attn"), d, c.num_heads),
                    ln_src: LayerNorm::new(&mut s, &format!("{n}.norm_src"), d),
                    src_attn: MultiHeadAttention::new(&mut s, &mut rng, &format!("{n}.src_attn"), d, c.num_heads),
                    ln_ff: LayerNorm::new(&mut s, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(&mut s, &mut rng, &format!("{n}.ff"), d, c.d_ffn, Activation::Relu),
                }
            })
            .collect();
        let dec_ln = LayerNorm::new(&mut s, "decoder.norm_out", d);
        let dec_out = Linear::scaled(&mut s, &mut rng, "decoder.out", d, c.vocab_size, 0.1);

        let layout = Layout { subsample, encoder, ctc_out, embed, decoder, dec_ln, dec_out };
        Ok(Self { config, params: s, layout })
    }

    /// Shared (speaker-independent) parameter count.
    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn d_lhuc(&self) -> usize {
        self.config.d_lhuc()
    }

    /// Evaluation-mode encoder pass. Without a speaker the LHUC layer is the
    /// identity.
    pub fn encode<'a>(&self, input: impl Into<EncoderInput<'a, T>>, speaker: Option<&SpeakerParams<T>>) -> Result<EncoderOutput<T>> {
        let mut f = Forward::eval(self);
        let r = speaker.map(|s| f.graph.constant(s.r.clone()));
        let enc = f.encode(input, r)?;
        let states = f.graph.value(enc).clone();
        Ok(EncoderOutput { frames: states.shape()[0], states })
    }

    /// Front-end output at the LHUC point (evaluation mode).
    pub fn prepare(&self, features: &Tensor<T>) -> Result<Prepared<T>> {
        let mut f = Forward::eval(self);
        let x = f.graph.constant(features.clone());
        let h = f.lhuc_input(x)?;
        Ok(Prepared(f.graph.value(h).clone()))
    }

    /// Per-frame log-softmax of the CTC branch, `[frames', vocab]`.
    pub fn ctc_logits(&self, enc: &EncoderOutput<T>) -> Result<Tensor<T>> {
        let mut f = Forward::eval(self);
        let e = f.graph.constant(enc.states.clone());
        let lp = f.ctc_log_probs(e)?;
        Ok(f.graph.value(lp).clone())
    }

    /// Next-token log-distribution after `prefix` (which starts with sos).
    pub fn decode_step(&self, enc: &EncoderOutput<T>, prefix: &[usize]) -> Result<StepOutput<T>> {
        let mut f = Forward::eval(self);
        let e = f.graph.constant(enc.states.clone());
        let out = f.decode(e, prefix)?;
        let last = prefix.len() - 1;
        let row = |g: &Graph<T>, v: Var| g.value(v).row(last).to_vec();
        Ok(StepOutput {
            log_probs: row(&f.graph, out.log_probs),
            logits: row(&f.graph, out.logits),
            hidden: row(&f.graph, out.hidden),
        })
    }
}

impl<T: Scalar> Forward<'_, T> {
    /// Front-end up to the LHUC point: both convolutions, plus the
    /// projection when LHUC sits on the subsampling output.
    pub fn lhuc_input(&mut self, features: Var) -> Result<Var> {
        let c = &self.model.config;
        let (probe, stride) = (c.linear_probe, c.subsample_stride);
        let shape = self.graph.value(features).shape().to_vec();
        if shape.len() != 2 || shape[1] != c.feat_dim {
            return Err(Error::DimMismatch { expected: c.feat_dim, got: shape.get(1).copied().unwrap_or(0) });
        }
        if shape[0] < c.min_frames() {
            return Err(Error::InputTooShort { frames: shape[0], min: c.min_frames() });
        }
        let placement = c.lhuc_placement;
        let ss = &self.model.layout.subsample;
        let mut h = self.graph.reshape(features, vec![shape[0], shape[1], 1])?;
        for (w, b) in [(ss.conv1_w, ss.conv1_b), (ss.conv2_w, ss.conv2_b)] {
            let (w, b) = (self.p(w), self.p(b));
            h = self.graph.conv2d(h, w, (stride, stride), (1, 1))?;
            h = self.graph.add(h, b)?;
            if !probe {
                h = self.graph.relu(h)?;
            }
        }
        let hs = self.graph.value(h).shape().to_vec();
        let h = self.graph.reshape(h, vec![hs[0], hs[1] * hs[2]])?;
        match placement {
            LhucPlacement::SubsampleOutput => self.model.layout.subsample.proj.forward(self, h),
            LhucPlacement::ConvOutput => Ok(h),
        }
    }

    /// Convolution subsampling, with the LHUC layer at its configured place.
    pub fn subsample(&mut self, features: Var, lhuc_r: Option<Var>) -> Result<Var> {
        let h = self.lhuc_input(features)?;
        self.after_lhuc_input(h, lhuc_r)
    }

    fn after_lhuc_input(&mut self, h: Var, lhuc_r: Option<Var>) -> Result<Var> {
        let h = match lhuc_r {
            Some(r) => lhuc_scale(&mut self.graph, h, r)?,
            None => h,
        };
        match self.model.config.lhuc_placement {
            LhucPlacement::SubsampleOutput => Ok(h),
            LhucPlacement::ConvOutput => self.model.layout.subsample.proj.forward(self, h),
        }
    }

    pub fn encode<'a>(&mut self, input: impl Into<EncoderInput<'a, T>>, lhuc_r: Option<Var>) -> Result<Var> {
        let mut h = match input.into() {
            EncoderInput::Features(x) => {
                let x = self.graph.constant(x.clone());
                self.subsample(x, lhuc_r)?
            }
            EncoderInput::Prepared(p) => {
                let h = self.graph.constant(p.0.clone());
                self.after_lhuc_input(h, lhuc_r)?
            }
        };
        if self.model.config.encoder_pos_enc {
            let shape = self.graph.value(h).shape().to_vec();
            let pe = self.graph.constant(positional_encoding(shape[0], shape[1]));
            h = self.graph.add(h, pe)?;
        }
        let half = T::lit(0.5);
        let model = self.model;
        for blk in &model.layout.encoder {
            let y = blk.ln_ff1.forward(self, h)?;
            let y = blk.ff1.forward(self, y)?;
            let y = self.dropout(y)?;
            let y = self.graph.scale(y, half)?;
            h = self.graph.add(h, y)?;

            let y = blk.ln_mha.forward(self, h)?;
            let y = blk.mha.forward(self, y, y, None)?;
            let y = self.dropout(y)?;
            h = self.graph.add(h, y)?;

            let y = blk.ln_conv.forward(self, h)?;
            let y = blk.conv.forward(self, y)?;
            let y = self.dropout(y)?;
            h = self.graph.add(h, y)?;

            let y = blk.ln_ff2.forward(self, h)?;
            let y = blk.ff2.forward(self, y)?;
            let y = self.dropout(y)?;
            let y = self.graph.scale(y, half)?;
            h = self.graph.add(h, y)?;

            h = blk.ln_out.forward(self, h)?;
        }
        Ok(h)
    }

    pub fn ctc_log_probs(&mut self, enc: Var) -> Result<Var> {
        let logits = self.model.layout.ctc_out.forward(self, enc)?;
        Ok(self.graph.log_softmax(logits)?)
    }

    /// Teacher-forced decoder over `inputs` (sos-prefixed), causal.
    pub fn decode(&mut self, enc: Var, inputs: &[usize]) -> Result<DecoderVars> {
        let model = self.model;
        let c = &model.config;
        if inputs.is_empty() || inputs[0] != c.sos() {
            return Err(Error::Config("decoder prefix must start with sos".into()));
        }
        if inputs.len() >= c.max_decode_len {
            return Err(Error::PrefixTooLong { len: inputs.len(), max: c.max_decode_len });
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::BadToken(bad));
        }
        let d = c.d_model;
        let u = inputs.len();
        let table = self.p(model.layout.embed.table);
        let e = self.graph.embedding(table, inputs)?;
        let e = self.graph.scale(e, T::lit((d as f64).sqrt()))?;
        let pe = self.graph.constant(positional_encoding(u, d));
        let e = self.graph.add(e, pe)?;
        let mut h = self.dropout(e)?;
        let mask = self.graph.constant(causal_mask(u));
        for blk in &model.layout.decoder {
            let y = blk.ln_self.forward(self, h)?;
            let y = blk.self_attn.forward(self, y, y, Some(mask))?;
            let y = self.dropout(y)?;
            h = self.graph.add(h, y)?;

            let y = blk.ln_src.forward(self, h)?;
            let y = blk.src_attn.forward(self, y, enc, None)?;
            let y = self.dropout(y)?;
            h = self.graph.add(h, y)?;

            let y = blk.ln_ff.forward(self, h)?;
            let y = blk.ff.forward(self, y)?;
            let y = self.dropout(y)?;
            h = self.graph.add(h, y)?;
        }
        let hidden = model.layout.dec_ln.forward(self, h)?;
        let logits = model.layout.dec_out.forward(self, hidden)?;
        let log_probs = self.graph.log_softmax(logits)?;
        Ok(DecoderVars { logits, log_probs, hidden })
    }
}
