//! Graph advection simulation and topology-informed graph neural controlled
//! differential equations for vertex forecasting.

pub mod advection;
pub mod control;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod model;
pub mod topology;
pub mod train;

pub use error::{CoreError, Result};
