//! Survey-design optimisation and hierarchical Bayes sample reduction.

pub mod allocation;
pub mod area;
pub mod error;
pub mod estimators;
pub mod hb;
pub mod mc;
pub mod numeric;
pub mod pipeline;
pub mod popgen;
pub mod reduction;
pub mod rng;
pub mod sampling;

pub use area::{Area, Variable};
pub use error::{Error, Result};
