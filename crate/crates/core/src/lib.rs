//! Latent model-predictive control: a recurrent state-space world model, a
//! Gaussian-mixture MPPI planner in belief space, an ensemble critic with
//! uncertainty-gated lambda returns, and the learner that ties them together.

pub mod checkpoint;
pub mod error;
pub mod gaussian;
pub mod learner;
pub mod nn;
pub mod planner;
pub mod seed;
pub mod types;
pub mod value;
pub mod worldmodel;

pub use error::{Error, Result};
