//! Dynamic regression discontinuity estimation.
//!
//! The pipeline runs from a long-format [`data::Panel`] through cohort
//! [`data::EventSample`]s and per-horizon [`data::RdVectors`] to robust
//! bias-corrected estimates ([`estimator::estimate`]), data-driven bandwidths
//! ([`bandwidth::select_bandwidths`]), cohort aggregation
//! ([`aggregate::event_study`]) and the common-trends pre-test
//! ([`pretrend::joint_test`]). [`sim`] provides the simulation design and a
//! Monte Carlo harness.

pub mod aggregate;
pub mod bandwidth;
pub mod data;
pub mod error;
pub mod estimator;
pub mod localpoly;
pub mod pretrend;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
