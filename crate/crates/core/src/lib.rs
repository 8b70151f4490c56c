//! Contrastive feature learning for fault detection on condition-monitoring
//! time series.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod detection;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod helm;
pub mod io;
pub mod nn;
pub mod occ;
pub mod pipeline;
pub mod prep;
pub mod sim;

pub use error::{Error, Result};
