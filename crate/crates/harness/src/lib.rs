//! Experiment harness: synthetic tasks, training loops, suites and benchmarks.

pub mod adaptive;
pub mod bench;
pub mod checks;
pub mod config;
pub mod error;
pub mod record;
pub mod suite;
pub mod task;
pub mod train;

pub use error::{HarnessError, Result};
