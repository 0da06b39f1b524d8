//! Small-mass limits of mean-field Langevin dynamics: coupled simulation of
//! the underdamped system and its limits, distance estimators, Malliavin
//! derivative slices, and alpha-sweep rate fits.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod distances;
pub mod error;
pub mod integrators;
pub mod malliavin;
pub mod model;
pub mod noise;
pub mod ratefit;
pub mod special;
