//! Forecasting-driven successor-UAV reservation: scenario model, channel,
//! risk prediction, reservation templates, stable matching and a
//! deterministic slot engine.

pub mod audit;
pub mod config;
pub mod engine;
pub mod error;
pub mod geo;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod risk;
pub mod template;
pub mod utility;

pub use error::{FrescoError, Result};
