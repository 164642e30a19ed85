//! Amortized Bayesian filtering and smoothing for state-space models.
//!
//! A stacked LSTM summarizes each observation prefix `y_{1:t}` into `s_t`.
//! A forward conditional flow models the filtering law `p(u_t | s_t)` and a
//! backward conditional flow models the backward kernel
//! `p(u_t | u_{t+1}, s_t)`. Both are trained jointly by maximum likelihood
//! on simulated trajectories. The crate also ships a flow-based particle
//! filter, closed-form linear-Gaussian references, benchmark simulators and
//! evaluation metrics.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod flows;
pub mod fluid;
pub mod gaussian;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod model_io;
pub mod pf;
pub mod ssm;

pub use error::{Error, Result};
