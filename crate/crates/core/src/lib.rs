pub mod autodiff;
pub mod checks;
pub mod construct;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod theory;
pub mod train;
pub mod world;

pub use error::{Error, Result};
