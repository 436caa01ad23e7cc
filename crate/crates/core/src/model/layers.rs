use lhuc_autograd::{Graph, Scalar, Tensor, Var};
use rand::Rng;

use super::params::{normal, uniform, xavier_bound, ParamId, ParamStore};
use super::ConformerModel;
use crate::error::Result;

/// One forward computation over a model: the graph plus lazily bound weights.
///
/// Weights are bound as differentiable leaves only when `train_weights` is
/// set; adaptation runs bind them as constants so backward stops at the
/// speaker parameters.
pub struct Forward<'m, T: Scalar> {
    pub model: &'m ConformerModel<T>,
    pub graph: Graph<T>,
    bound: Vec<Option<Var>>,
    train_weights: bool,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn eval(model: &'m ConformerModel<T>) -> Self {
        Self::with_graph(model, Graph::new(), false)
    }

    /// Training-mode forward (dropout active, masks seeded by `seed`).
    pub fn train(model: &'m ConformerModel<T>, seed: u64, train_weights: bool) -> Self {
        Self::with_graph(model, Graph::training(seed), train_weights)
    }

    pub fn with_graph(model: &'m ConformerModel<T>, graph: Graph<T>, train_weights: bool) -> Self {
        Self { model, graph, bound: vec![None; model.params.len()], train_weights }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.model.params.get(id).clone();
        let v = self.graph.leaf(t, self.train_weights);
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn dropout(&mut self, x: Var) -> Result<Var> {
        Ok(self.graph.dropout(x, self.model.config.dropout_rate)?)
    }

    /// Gradients of every weight bound in this forward, by parameter index.
    pub fn weight_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.graph.grad(v).cloned())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::scaled(store, rng, name, fan_in, fan_out, 1.0)
    }

    pub fn scaled<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], gain * xavier_bound(fan_in, fan_out)));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.graph.matmul(x, w)?;
        Ok(f.graph.add(y, b)?)
    }

    /// Same computation named as a 1-D pointwise convolution over frames.
    pub fn pointwise<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.graph.pointwise_conv1d(x, w)?;
        Ok(f.graph.add(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![d], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![d]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        let n = f.graph.layer_norm(x)?;
        let y = f.graph.mul(n, gamma)?;
        Ok(f.graph.add(y, beta)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Swish,
    Relu,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize, d_ffn: usize, act: Activation) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.w1"), d, d_ffn),
            l2: Linear::new(store, rng, &format!("{name}.w2"), d_ffn, d),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(f, x)?;
        let h = match self.act {
            Activation::Swish => f.graph.swish(h)?,
            Activation::Relu => f.graph.relu(h)?,
        };
        let h = f.dropout(h)?;
        self.l2.forward(f, h)
    }
}

/// Additive mask blocking attention to future positions.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(vec![n, n]);
    let neg = T::lit(-1e9);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = neg;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    /// Scaled dot-product attention of `query[tq, d]` over `memory[tk, d]`,
    /// with an optional additive `[tq, tk]` mask.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, query: Var, memory: Var, mask: Option<Var>) -> Result<Var> {
        let q = self.q.forward(f, query)?;
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let d = f.graph.value(q).shape()[1];
        let dk = d / self.heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    f.graph.slice(q, 1, h * dk, (h + 1) * dk)?,
                    f.graph.slice(k, 1, h * dk, (h + 1) * dk)?,
                    f.graph.slice(v, 1, h * dk, (h + 1) * dk)?,
                )
            };
            let kt = f.graph.transpose(kh)?;
            let s = f.graph.matmul(qh, kt)?;
            let mut s = f.graph.scale(s, scale)?;
            if let Some(m) = mask {
                s = f.graph.add(s, m)?;
            }
            let a = f.graph.softmax(s)?;
            let a = f.dropout(a)?;
            outs.push(f.graph.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { f.graph.concat(&outs, 1)? };
        self.o.forward(f, cat)
    }
}

/// Conformer convolution module: pointwise conv, GLU, pointwise conv,
/// depthwise conv, swish, pointwise conv.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub pw1: Linear,
    pub pw2: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub pw3: Linear,
}

impl ConvModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize, kernel: usize) -> Self {
        let pw1 = Linear::new(store, rng, &format!("{name}.pointwise1"), d, 2 * d);
        let pw2 = Linear::new(store, rng, &format!("{name}.pointwise2"), d, d);
        let dw_w = store.add(format!("{name}.depthwise.weight"), uniform(rng, &[kernel, d], xavier_bound(kernel, 1)));
        let dw_b = store.add(format!("{name}.depthwise.bias"), Tensor::zeros(vec![d]));
        let pw3 = Linear::new(store, rng, &format!("{name}.pointwise3"), d, d);
        Self { pw1, pw2, dw_w, dw_b, pw3 }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.pw1.pointwise(f, x)?;
        let h = f.graph.glu(h)?;
        let h = self.pw2.pointwise(f, h)?;
        let (w, b) = (f.p(self.dw_w), f.p(self.dw_b));
        let h = f.graph.depthwise_conv1d(h, w)?;
        let h = f.graph.add(h, b)?;
        let h = f.graph.swish(h)?;
        self.pw3.pointwise(f, h)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, vocab: usize, d: usize) -> Self {
        Self { table: store.add(format!("{name}.table"), normal(rng, &[vocab, d], (d as f64).powf(-0.5))) }
    }
}

/// Sinusoidal absolute position table `[n, d]`.
pub fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let freq = (-(10000f64.ln()) * (2 * (i / 2)) as f64 / d as f64).exp();
            let a = pos as f64 * freq;
            data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![n, d], data).expect("pe shape")
}
