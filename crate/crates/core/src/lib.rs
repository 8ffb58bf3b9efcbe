//! Rate-equation simulation of optical-pumping state preparation for
//! trapped-ion hyperfine qubits at intermediate magnetic field.

pub mod angular;
pub mod budget;
pub mod config;
pub mod error;
pub mod microwave;
pub mod rates;
pub mod registry;
pub mod schemes;
pub mod species;
pub mod structure;

pub use error::{Error, Result};
