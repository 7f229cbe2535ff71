pub mod baselines;
pub mod data;
pub mod error;
pub mod forest;
pub mod forestiv;
pub mod lasso;
pub mod linalg;
pub mod regression;
pub mod seed;
pub mod simlab;

pub use error::{Error, Result};
