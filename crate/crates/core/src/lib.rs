pub mod action;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod planner;
pub mod refiner;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
