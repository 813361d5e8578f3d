//! Simulator and analysis toolkit for photoelectric readout (PDMR) of
//! nitrogen-vacancy ensemble magnetometers.
//!
//! - [`nv`]: resonances, level dynamics and the spin-dependent photocurrent
//! - [`detector`]: IPCD digitization, lock-in, noise budget
//! - [`sequence`]: pulse-sequence language, generators and sampling
//! - [`fit`]: Levenberg–Marquardt curve fitting
//! - [`experiments`]: simulated sweeps with fits
//! - [`sensitivity`]: closed-form sensitivity and scaling
//! - [`io`]: config files, canonical form, result files

// `!(x > 0.0)` is used throughout so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod experiments;
pub mod fit;
pub mod io;
pub mod nv;
pub mod sensitivity;
pub mod sequence;
