pub mod action;
pub mod error;
pub mod genfun;
pub mod hamflow;
pub mod hamlang;
pub mod linalg;
pub mod orbits;
pub mod scalar;
pub mod suspension;
pub mod torus;
pub mod twistmap;

pub use error::{Error, Result};
pub use scalar::Real;
