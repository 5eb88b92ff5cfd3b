//! Learned depth routing for frozen layered models: per-layer routers choose to
//! skip, execute or repeat each layer, trained from paths found by tree search.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod routing;
pub mod search;
pub mod seed;
pub mod supervision;
pub mod tasks;

pub use error::{Error, Result};
