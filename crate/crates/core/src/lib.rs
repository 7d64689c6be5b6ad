//! Nonlinear stability analysis of gradient descent and SGD near minima.
//!
//! * [`tensor`]: polynomial losses, derivative tensors, Kronecker algebra.
//! * [`oscillation`]: period-2 oscillation criterion for GD at the edge of
//!   stability.
//! * [`dynamics`]: GD/SGD simulation, cycle detection, bifurcation scans,
//!   exact expectations over batch sequences.
//! * [`sgd`]: loss ensembles and SGD step-size thresholds.
//! * [`moments`]: truncated moment operator and its boundedness certificate.
//! * [`instances`]: seeded random losses, tensors and ensembles.

pub mod error;
pub mod instances;
pub mod rng;
pub mod dynamics;
pub mod moments;
pub mod oscillation;
pub mod sgd;
pub mod tensor;

pub use error::{Result, StabError};
