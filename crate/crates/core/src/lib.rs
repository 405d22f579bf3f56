//! Region-feature visual question answering.

pub mod ban;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod language;
pub mod numerics;
pub mod pipeline;
pub mod region;
pub mod train;

pub use error::{Error, Result};
