//! Moving-block bootstrap plus direct covariance modeling for uncertainty
//! quantification in a synthetic collaborative BEV detection world.

pub mod config;
pub mod detector;
pub mod distributions;
pub mod doublem;
pub mod error;
pub mod eval;
pub(crate) mod io;
pub mod math;
pub mod pipeline;
pub mod rng;
pub mod scenegen;
pub mod viz;

pub use error::{Error, Result};
