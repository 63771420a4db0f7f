//! Microsimulator and control library for connected automated vehicles on a
//! single-lane roundabout with three entries.
//!
//! The crate provides the road topology and vehicle model, per-conflict-zone
//! coordination tables, joint crossing-sequence selection, a horizon-based
//! barrier-constrained motion controller, several baseline controllers, and a
//! deterministic discrete-time simulator with CSV/JSON/SVG output.

pub mod baselines;
pub mod config;
pub mod coordinator;
pub mod dynamics;
pub mod metrics;
pub mod error;
pub mod mpc;
pub mod qp;
pub mod safety;
pub mod output;
pub mod sequencing;
pub mod sim;
pub mod topology;
pub mod unconstrained;

pub use error::Error;
