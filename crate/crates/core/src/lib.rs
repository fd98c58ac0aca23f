//! Neural trans-dimensional random field (TRF) language models.
//!
//! A TRF scores a whole sentence `x` of length `l` as
//! `p(l, x) = π_l · exp(φ(x; θ)) / Z_l(θ)`, where the potential `φ` is a deep
//! convolutional network ([`potential`]). Training alternates trans-dimensional
//! MCMC ([`sampler`]) with stochastic-approximation updates of θ, of the
//! log-normaliser ratios ζ, and of an autoregressive proposal
//! ([`proposal`]); see [`trainer`]. Scoring needs a single forward pass and no
//! per-position softmax ([`model`]), which makes n-best rescoring
//! ([`rescore`]) cheap.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod nn;
pub mod par;
pub mod model;
pub mod potential;
pub mod proposal;
pub mod rescore;
pub mod sampler;
pub mod trainer;

pub use error::{Result, TrfError};
