pub mod backbone;
mod binio;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
