use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Inverted dropout. Identity in evaluation mode; in training mode the
    /// keep-mask is drawn from the graph's seeded stream and saved.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidAttr { kind: "dropout", detail: format!("p = {p}") });
        }
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng().gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    /// `mu + sigma * eps` with `eps` supplied by the caller and kept for the
    /// backward rule, so gradients reach both `mu` and `sigma`.
    pub fn reparameterize(&mut self, mu: Var, sigma: Var, eps: &Tensor<T>) -> Result<Var> {
        let (mv, sv) = (self.value(mu), self.value(sigma));
        if mv.shape() != sv.shape() || mv.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                kind: "reparameterize",
                shapes: vec![mv.shape().to_vec(), sv.shape().to_vec(), eps.shape().to_vec()],
            });
        }
        let data = mv
            .data()
            .iter()
            .zip(sv.data())
            .zip(eps.data())
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let out = Tensor::new(mv.shape().to_vec(), data)?;
        self.push("reparameterize", out, Op::Reparameterize { mu, sigma, eps: eps.data().to_vec() })
    }
}
