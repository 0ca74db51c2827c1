//! Long-horizon time-series forecasting with windowed attention, recurrent
//! seasonal-trend distillation and a conditional normalizing-flow head.

pub mod error;
pub mod attention;
pub mod bench;
pub mod dataio;
pub mod inputrep;
pub mod model;
pub mod normflow;
pub mod numcore;
pub mod sirn;

pub use error::{Error, ErrorKind, Result};
