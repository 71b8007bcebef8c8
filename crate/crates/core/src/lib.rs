//! Self-evolution orchestration: evidence curation, the evolution loop,
//! coding-agent runners, trial verification and health-gated image swaps.

pub mod autoscan;
pub mod cli;
pub mod clock;
pub mod error;
pub mod hostd;
pub mod ids;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod runners;
pub mod sandbox;
pub mod store;
pub mod traffic;
pub mod trials;
pub mod webhook;
pub mod workspace;

pub use error::{Error, Result};
