pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod shift;
pub mod training;
pub mod wkv;

pub use error::{Error, Result};
