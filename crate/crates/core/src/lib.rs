//! Federated cross-view geo-localization.
//!
//! A ground camera's planar pose is refined against a georeferenced aerial
//! crop by a differentiable coarse-to-fine Levenberg-Marquardt solver over
//! learned feature pyramids. Feature networks are trained per client and
//! combined with federated averaging, either of the full model or of the
//! encoders only.

pub mod error;
pub mod feature_net;
pub mod federation;
pub mod geometry;
pub mod lm_solver;
pub mod metrics;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
mod test_support;
