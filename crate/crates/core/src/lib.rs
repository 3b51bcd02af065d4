pub mod cli;
pub mod color;
pub mod colorhull;
pub mod compositor;
pub mod dataio;
pub mod error;
pub mod field;
pub mod optimizer;
pub mod palette;
pub mod renderer;
pub mod service;

pub use color::ColorPoint;
pub use error::{Error, Result};
