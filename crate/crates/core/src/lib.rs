//! Desk-scale simulation of thermal operations with coherent resources.
//!
//! The crate is organised bottom-up:
//!
//! * [`qstate`]: exact energies, Hamiltonians, density operators and the
//!   entropic functionals (entropy, relative entropy, free energy).
//! * [`modes`]: coherent modes of a state and integer-linearly independent
//!   bases of their integer span.
//! * [`channels`]: thermal operations, pinching and structural checks.
//! * [`classical`]: thermomajorization, Gibbs-stochastic LP feasibility and
//!   the design of classical targets.
//! * [`catcoherence`]: ladder resource states and shift-compensated
//!   energy-conserving unitaries.
//! * [`randomwalk`]: the drift walk of the resource, the hitting bound and a
//!   Monte Carlo estimator.
//! * [`protocol`]: the end-to-end marginal conversion and the correlated
//!   catalyst built on top of it.

pub mod catcoherence;
pub mod channels;
pub mod classical;
pub mod error;
pub mod modes;
pub mod protocol;
pub mod qstate;
pub mod randomwalk;

pub use error::{Error, Result};
