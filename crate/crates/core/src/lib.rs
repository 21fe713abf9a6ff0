//! Demand-response pricing lab.
//!
//! A provider buys power from the distribution operator, owns a battery and
//! renewable generation, and sets a retail price each hour. Users answer the
//! price with their welfare-maximizing demand and report a quantized
//! satisfaction score. The provider is trained with twin-delayed deterministic
//! policy gradients on a multi-branch recurrent feature extractor, with a
//! dynamically adjusted satisfaction penalty in the reward; small instances are
//! certified against exhaustive search and dynamic programming.

pub mod agent;
pub mod approximator;
pub mod cli;
pub mod dataio;
pub mod domain;
pub mod error;
pub mod market_env;
pub mod oracle;
pub mod penalty;
pub mod user_model;

pub use error::{Error, Result};
