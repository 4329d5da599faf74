pub mod attention;
pub mod encoding;
pub mod error;
pub mod expressiveness;
pub mod graph;
pub mod io;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
