//! Robust linear precoding for the massive MIMO downlink with aged,
//! imperfectly estimated channels.
//!
//! The crate covers the full chain: a priori statistics and channel aging,
//! the pilot-based posterior channel model, closed-form quadratic
//! expectation operators, the deterministic-equivalent rate fixed point,
//! minorize-maximize precoder updates, beam-domain power allocation for
//! zero-mean channels, conventional baselines and a Monte Carlo harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod baselines;
pub mod beam;
pub mod channel;
pub mod config;
pub mod det_equiv;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod linalg;
pub mod mm;
pub mod operators;
pub mod posterior;
pub mod rng;

pub use config::{DesignParams, SystemConfig};
pub use error::{Error, Result};
pub use linalg::{CMat, RMat, C64};
