//! Query-based video object tracking with dynamic anchor queries, trained and
//! evaluated on procedural scenarios with a synthetic segmenter.

pub mod cli;
pub mod config;
pub mod daq;
pub mod eds;
pub mod eval;
pub mod error;
pub mod matching;
pub mod nn;
pub mod pad;
pub mod scenario;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
