//! Training diagnostics for small models.
//!
//! `autodiff` trains and probes models, `quantities` turns per-sample
//! observations into instrument readings, `problems` provides seeded synthetic
//! tasks, `runner` drives instrumented SGD, and `log`/`render` persist and draw
//! the results.

pub mod autodiff;
pub mod error;
pub mod log;
pub mod problems;
pub mod quantities;
pub mod render;
pub mod runner;

pub use error::{Error, Result};
