//! Legendre-coefficient action chunks with cross-horizon continuity,
//! history-anchored one-step flow matching, and a torque-controlled
//! rollout harness with analytic velocity feed-forward.

pub mod basis;
pub mod bench;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{FlashError, Result};
