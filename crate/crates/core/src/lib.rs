pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod objectives;
pub mod refinement;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
