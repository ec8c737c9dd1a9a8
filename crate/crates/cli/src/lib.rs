//! Configuration, experiment runner and invariant suite for `contact-hj`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;
pub mod verify;

pub use config::{Experiment, Resolved, RunConfig};
pub use run::{execute, prepare, run, Overrides, RunError, RunSummary, Seeds};
pub use verify::{verify_suite, Check, VerifyTable};
