//! District heating system control library.
//!
//! Models the thermal dynamics of a producer/consumer heat-exchanger network,
//! solves the steady-state economic dispatch, and learns the optimal
//! temperature-regulation gain directly from closed-loop trajectory data via
//! on-policy policy iteration. A simulation harness scripts the comparison
//! experiments and writes CSV/JSON run artifacts.

pub mod augment;
pub mod baseline;
pub mod config;
pub mod error;
pub mod harness;
pub mod learner;
pub mod network;
pub mod numerics;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod test_support;
