pub mod conformal;
pub mod error;
pub mod highway;
pub mod policy;
pub mod predictor;
pub mod runner;
pub mod track;

pub use error::{Error, Result};
