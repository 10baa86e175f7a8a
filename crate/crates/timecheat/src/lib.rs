//! TimeCHEAT: bipartite-graph patch embedding (channel-dependent locally)
//! and channel-independent Transformer encoding (globally) for irregularly
//! sampled multivariate time series, with classification, interpolation,
//! and forecasting heads trained end to end on a from-scratch reverse-mode
//! differentiation substrate.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
