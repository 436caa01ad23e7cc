//! Gaussian variational posterior over the LHUC vector and its bound:
//! a Monte-Carlo data term plus a closed-form KL to the prior.

use lhuc_autograd::{Graph, Scalar, Tensor, Var};

use super::MultitaskConfig;
use crate::error::{Error, Result};
use crate::model::{ConformerModel, EncoderInput, Forward, SpeakerParams};

/// `q(r) = N(mu, exp(log_sigma)^2)`, diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior<T> {
    pub mu: Tensor<T>,
    pub log_sigma: Tensor<T>,
}

impl<T: Scalar> VariationalPosterior<T> {
    pub fn new(d: usize, log_sigma_init: T) -> Self {
        Self { mu: Tensor::zeros(vec![d]), log_sigma: Tensor::full(vec![d], log_sigma_init) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Tensor<T> {
        self.log_sigma.map(T::exp)
    }

    /// Test-time parameters: the posterior mean only.
    pub fn mean_params(&self, speaker_id: &str) -> SpeakerParams<T> {
        SpeakerParams { speaker_id: speaker_id.to_string(), r: self.mu.clone() }
    }
}

/// `p(r) = N(mu_r, sigma_r^2)`, diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec<T> {
    pub mu_r: Tensor<T>,
    pub sigma_r: Tensor<T>,
}

impl<T: Scalar> PriorSpec<T> {
    pub fn standard(d: usize) -> Self {
        Self { mu_r: Tensor::zeros(vec![d]), sigma_r: Tensor::full(vec![d], T::one()) }
    }

    pub fn new(mu_r: Vec<T>, sigma_r: Vec<T>) -> Result<Self> {
        if mu_r.len() != sigma_r.len() {
            return Err(Error::DimMismatch { expected: mu_r.len(), got: sigma_r.len() });
        }
        if sigma_r.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::Config("prior sigma must be positive and finite".into()));
        }
        Ok(Self { mu_r: Tensor::vector(mu_r), sigma_r: Tensor::vector(sigma_r) })
    }

    pub fn dim(&self) -> usize {
        self.mu_r.len()
    }
}

fn check_dims<T: Scalar>(q: &VariationalPosterior<T>, p: &PriorSpec<T>) -> Result<()> {
    if q.mu.len() != p.dim() || q.log_sigma.len() != p.dim() {
        return Err(Error::DimMismatch { expected: p.dim(), got: q.mu.len() });
    }
    Ok(())
}

/// `KL(q || p) = 1/2 sum[(sigma^2 + (mu - mu_r)^2) / sigma_r^2 + 2 ln(sigma_r / sigma) - 1]`.
pub fn kl_gaussians<T: Scalar>(q: &VariationalPosterior<T>, p: &PriorSpec<T>) -> Result<T> {
    check_dims(q, p)?;
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let mut acc = T::zero();
    for i in 0..p.dim() {
        let (mu, ls) = (q.mu.data()[i], q.log_sigma.data()[i]);
        let (mr, sr) = (p.mu_r.data()[i], p.sigma_r.data()[i]);
        let s2 = (two * ls).exp();
        let d = mu - mr;
        acc = acc + (s2 + d * d) / (sr * sr) + two * (sr.ln() - ls) - T::one();
    }
    Ok(half * acc)
}

/// Graph form of [`kl_gaussians`] over `mu` and `log_sigma` leaves.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var, p: &PriorSpec<T>) -> Result<Var> {
    let d = g.value(mu).len();
    if d != p.dim() || g.value(log_sigma).len() != p.dim() {
        return Err(Error::DimMismatch { expected: p.dim(), got: d });
    }
    let two = T::lit(2.0);
    let two_ls = g.scale(log_sigma, two)?;
    let s2 = g.exp(two_ls)?;
    let mr = g.constant(p.mu_r.clone());
    let diff = g.sub(mu, mr)?;
    let d2 = g.mul(diff, diff)?;
    let num = g.add(s2, d2)?;
    let inv = g.constant(p.sigma_r.map(|s| T::one() / (s * s)));
    let ratio = g.mul(num, inv)?;
    let t = g.sub(ratio, two_ls)?;
    let s = g.sum(t)?;
    let c: T = p.sigma_r.data().iter().map(|&s| two * s.ln() - T::one()).sum();
    let c = g.constant(Tensor::scalar(c));
    let total = g.add(s, c)?;
    Ok(g.scale(total, T::lit(0.5))?)
}

/// One evaluation of the bound `L1 + L2` and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalEval<T> {
    pub loss: T,
    /// Monte-Carlo data term.
    pub l1: T,
    /// KL term.
    pub kl: T,
    pub grad_mu: Tensor<T>,
    pub grad_log_sigma: Tensor<T>,
}

/// `L1 = (1/N) sum_k sum_u L(u; r_k)` with `r_k = mu + sigma * eps_k`, plus
/// `L2 = KL(q || p)`. Each `eps_k` is shared by every utterance of the set.
pub fn variational_loss<T: Scalar>(
    model: &ConformerModel<T>,
    utterances: &[(EncoderInput<'_, T>, &[usize])],
    q: &VariationalPosterior<T>,
    p: &PriorSpec<T>,
    eps: &[Tensor<T>],
    cfg: &MultitaskConfig,
) -> Result<VariationalEval<T>> {
    if utterances.is_empty() {
        return Err(Error::EmptyAdaptationSet);
    }
    if eps.is_empty() {
        return Err(Error::Config("at least one Monte-Carlo sample is required".into()));
    }
    check_dims(q, p)?;
    let d = q.dim();
    let inv_n = T::one() / T::lit(eps.len() as f64);
    let mut l1 = T::zero();
    let mut grad_mu = Tensor::zeros(vec![d]);
    let mut grad_ls = Tensor::zeros(vec![d]);
    for e in eps {
        if e.len() != d {
            return Err(Error::DimMismatch { expected: d, got: e.len() });
        }
        for &(features, target) in utterances {
            let mut f = Forward::eval(model);
            let mu = f.graph.param(q.mu.clone());
            let ls = f.graph.param(q.log_sigma.clone());
            let sigma = f.graph.exp(ls)?;
            let r = f.graph.reparameterize(mu, sigma, e)?;
            let v = f.multitask_loss(features, target, Some(r), cfg)?;
            let scaled = f.graph.scale(v.total, inv_n)?;
            f.graph.backward(scaled)?;
            l1 = l1 + f.graph.value(scaled).data()[0];
            if let Some(gm) = f.graph.grad(mu) {
                grad_mu.add_assign(gm);
            }
            if let Some(gl) = f.graph.grad(ls) {
                grad_ls.add_assign(gl);
            }
        }
    }
    let mut g = Graph::new();
    let mu = g.param(q.mu.clone());
    let ls = g.param(q.log_sigma.clone());
    let kl = kl_graph(&mut g, mu, ls, p)?;
    g.backward(kl)?;
    grad_mu.add_assign(g.grad(mu).expect("kl reaches mu"));
    grad_ls.add_assign(g.grad(ls).expect("kl reaches log_sigma"));
    let kl = g.value(kl).data()[0];
    Ok(VariationalEval { loss: l1 + kl, l1, kl, grad_mu, grad_log_sigma: grad_ls })
}
