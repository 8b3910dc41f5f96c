pub mod contact;
pub mod dynamics;
pub mod error;
pub mod identification;
pub mod lcp;
pub mod render;
pub mod scenarios;
pub mod world;

pub use error::{Error, Result};
