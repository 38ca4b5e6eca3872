//! Federated learning simulator with projected trajectory regularization.
//!
//! Clients train on non-i.i.d. shards with a proximal term that pulls them
//! toward a *projected* next global model: a few gradient steps on a small
//! auxiliary dataset whose training dynamics were matched to the recent
//! global trajectory. FedAvg and FedProx are the degenerate cases.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod localsolver;
pub mod model;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod trajectory;

pub use error::{FedError, Result};
pub use model::{Activation, Batch, ModelSpec};
pub use params::{LayerMap, LayerSpan, ParamVector};
