//! Factor-based SV-Itô volatility modelling for large panels of
//! high-frequency prices.

pub mod error;
pub mod factor;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod portfolio;
pub mod predict;
pub mod realized;
pub mod sim;
pub mod svmodel;

pub use error::{Error, Result};
