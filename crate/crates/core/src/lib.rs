pub mod cli;
pub mod config;
pub mod error;
pub mod grammar;
pub mod gradsuite;
pub mod model;
pub mod nmn;
pub mod persist;
pub mod pipeline;
pub mod prior;
pub mod probe;
pub mod seq;
pub mod train;
pub mod world;

pub use error::{Error, Result};
