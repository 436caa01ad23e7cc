//! LHUC speaker adaptation for a toy Conformer encoder-decoder recognizer:
//! the model, its losses, deterministic and Bayesian test-time adaptation,
//! confidence estimation, beam-search decoding and a synthetic corpus.

pub mod adaptation;
pub mod confidence;
pub mod corpus;
pub mod decoding;
pub mod error;
#[doc(hidden)]
pub mod fixtures;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
pub use lhuc_autograd as autograd;

/// Concrete double-precision aliases.
pub type Model = model::ConformerModel<f64>;
pub type Checkpoint = model::checkpoint::Checkpoint<f64>;
pub type Speaker = model::SpeakerParams<f64>;
pub type Posterior = objectives::VariationalPosterior<f64>;
pub type Prior = objectives::PriorSpec<f64>;
