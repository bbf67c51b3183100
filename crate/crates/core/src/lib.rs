//! EM training of graph neural networks over a distribution of parametrized graphs.
//!
//! The E-step samples a Gibbs posterior over the graph parameter λ with
//! Metropolis–Hastings; the M-step takes importance-weighted gradient steps on
//! a λ-dependent GCN. See the README for the command-line front end.

pub mod autodiff;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod factory;
pub mod gibbs;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod param_space;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
