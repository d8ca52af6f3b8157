pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod model_io;
pub mod predict;
pub mod prior;
pub mod repro;
pub mod simulate;
pub mod survival;
pub(crate) mod tsv;

pub use error::{Error, Result};
