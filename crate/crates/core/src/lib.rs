//! Closed-loop cardiac monitoring and timed drug delivery.
//!
//! Simulated PPG / ECG Lead I signals are windowed, turned into Morlet CWT
//! scalograms and classified by a small convolutional network. Detections feed
//! a five-stage patient pathway whose final stage schedules doses, gates each
//! one through prescription safety checks and drives a virtual syringe pump
//! over a line-delimited JSON protocol.

// `!(x > 0.0)` is used on purpose so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read closer to the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod classifier;
pub mod closed_loop;
pub mod dosing;
pub mod error;
pub mod pathway;
pub mod pump;
pub mod signal_sim;
pub mod spectro;
pub mod time;

pub use error::{Error, Result};
