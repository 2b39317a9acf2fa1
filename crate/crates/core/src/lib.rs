//! Simulation of a slot car's logging device running on track power.
//!
//! The car picks up power from the rails, which are interrupted at lane
//! changes. A capacitor bridges the gaps; drawing too much current while
//! crossing one browns the device out. This crate models the supply, the
//! track, brownout-tolerant log storage, the channels available for getting
//! logs off the car, and strategies for using them.

// Negated float comparisons double as NaN checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod energy;
pub mod log_store;
pub mod report;
pub mod scenario;
pub mod strategy;
pub mod suites;
pub mod track;
pub mod transport;
pub mod world;
