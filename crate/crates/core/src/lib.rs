//! Particle solver for coupled mean-field forward-backward SDEs.
//!
//! The mean-field drift is removed from the forward equation by a change of
//! measure, the decoupled backward equation is solved by least-squares Monte
//! Carlo, and the law flow is found by damped fixed-point iteration over
//! empirical measure flows.

pub mod backward_lsmc;
pub mod coefficients;
pub mod error;
pub mod forward_sde;
pub mod girsanov;
pub mod io;
pub mod measure_flow;
pub mod mfg;
pub mod picard;
pub mod rng;
pub mod scenarios;

pub use error::{Error, Result};
