//! A defense against black-box membership inference that perturbs the
//! confidence vectors a classifier returns.
//!
//! The crate contains everything needed to train a target classifier and a
//! defender-side membership classifier, sanitize query answers under an L₁
//! distortion budget without ever changing the predicted label, and measure
//! the result against a suite of membership-inference attacks.
//!
//! ```no_run
//! use memguard::config::RunConfig;
//! use memguard::pipeline::Pipeline;
//!
//! # fn main() -> memguard::Result<()> {
//! let cfg = RunConfig::desk_scale();
//! let pipeline = Pipeline::train(&cfg)?;
//! let reports = pipeline.sweep()?;
//! print!("{}", memguard::eval::reports_to_csv(&reports));
//! # Ok(())
//! # }
//! ```

pub mod attack;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod memguard;
pub mod nn;
pub mod pipeline;
pub mod target;

pub use error::{Error, Result};
