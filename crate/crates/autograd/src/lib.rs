//! Dense tensors with a reverse-mode gradient tape, generic over `f32`/`f64`.
//!
//! ```
//! use lhuc_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{check_inputs, finite_difference_check};
pub use graph::{CustomBackward, Graph, UnaryKind, Var};
pub use ops::{BatchStats, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use scalar::{logsumexp, Scalar};
pub use tensor::Tensor;

/// Default element type.
pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
