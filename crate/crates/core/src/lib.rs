//! Solver and simulator for finite teams of exchangeable Markov agents
//! coupled through their empirical state–action distribution.

pub mod bounds;
pub mod dss;
pub mod error;
pub mod expr;
pub mod kernel;
pub mod model;
pub mod pdss;
pub mod raw;
pub mod service;
pub mod sim;
pub mod statespace;
pub mod util;

#[doc(hidden)]
pub mod testkit;

pub use error::{Error, Result};
