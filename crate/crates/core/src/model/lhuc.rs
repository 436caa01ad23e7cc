//! Learning hidden unit contributions: a per-speaker vector `r` rescales
//! hidden activations by `2 * sigmoid(r)`, elementwise, range (0, 2).

use lhuc_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic speaker-dependent LHUC vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerParams<T> {
    pub speaker_id: String,
    pub r: Tensor<T>,
}

impl<T: Scalar> SpeakerParams<T> {
    /// `r = 0`, so the scale is exactly one everywhere.
    pub fn identity(speaker_id: impl Into<String>, d_lhuc: usize) -> Self {
        Self { speaker_id: speaker_id.into(), r: Tensor::zeros(vec![d_lhuc]) }
    }

    pub fn new(speaker_id: impl Into<String>, r: Vec<T>) -> Self {
        Self { speaker_id: speaker_id.into(), r: Tensor::vector(r) }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// The scaling vector `2 * sigmoid(r)`.
    pub fn scales(&self) -> Vec<T> {
        self.r.data().iter().map(|&v| T::lit(2.0) * v.sigmoid()).collect()
    }
}

/// Serialized form used in checkpoints and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub r: Vec<f64>,
}

/// `hidden[frames, d] * 2 sigmoid(r)` broadcast over frames, recorded on `g`.
pub fn lhuc_scale<T: Scalar>(g: &mut Graph<T>, hidden: Var, r: Var) -> Result<Var> {
    let d = g.value(hidden).last_dim();
    let dr = g.value(r).len();
    if g.value(r).ndim() != 1 || d != dr {
        return Err(Error::DimMismatch { expected: d, got: dr });
    }
    let scale = g.two_sigmoid(r)?;
    Ok(g.mul(hidden, scale)?)
}

/// Plain-tensor form of [`lhuc_scale`].
pub fn apply_lhuc<T: Scalar>(hidden: &Tensor<T>, params: &SpeakerParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let r = g.constant(params.r.clone());
    let y = lhuc_scale(&mut g, h, r)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_r_is_exact_identity() {
        let h = Tensor::from_rows(&[vec![1.5f64, -2.0, 0.3], vec![7.0, 0.0, -1e-3]]).unwrap();
        let out = apply_lhuc(&h, &SpeakerParams::identity("s", 3)).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn scale_saturates_toward_range_ends() {
        let p = SpeakerParams::new("s", vec![25.0f64, -25.0]);
        let s = p.scales();
        assert!(s[0] < 2.0 && (2.0 - s[0]) < 1e-10);
        assert!(s[1] > 0.0 && s[1] < 1e-10);
    }

    #[test]
    fn ln3_gives_one_and_a_half() {
        // 2 σ(ln 3) = 2 * 3 / (3 + 1)
        let p = SpeakerParams::new("s", vec![3f64.ln()]);
        assert!((p.scales()[0] - 1.5).abs() < 1e-15);
        let h = Tensor::from_rows(&[vec![2.0f64], vec![-4.0]]).unwrap();
        let out = apply_lhuc(&h, &p).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-14);
        assert!((out.data()[1] + 6.0).abs() < 1e-14);
    }

    #[test]
    fn dim_mismatch() {
        let h = Tensor::<f64>::zeros(vec![2, 3]);
        let r = apply_lhuc(&h, &SpeakerParams::identity("s", 4));
        assert!(matches!(r, Err(Error::DimMismatch { expected: 3, got: 4 })));
    }
}
