pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod params;
pub mod robot;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
