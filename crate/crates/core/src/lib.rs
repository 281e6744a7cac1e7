//! Fixed-point CNN inference with direct and Winograd convolution engines,
//! arithmetic fault injection and the analyses built on top of it.

pub mod analysis;
pub mod conv;
pub mod energy;
pub mod error;
pub mod fault;
pub mod fxp;
pub mod io;
pub mod network;
pub mod rng;
pub mod stats;
pub mod tmr;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
