pub mod density;
pub mod dichotomy;
pub mod ergodicity;
pub mod error;
pub mod feedback;
pub mod kick;
pub mod ladder;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod rds;

pub use error::{Error, Result};
