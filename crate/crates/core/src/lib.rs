pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod lp_geometry;
pub mod models;
pub mod training;

pub use error::{Error, Result};
