//! Satellite image time-series forecasting with temporally consistent
//! conditioning, plus the metrics to judge it.

pub mod attention;
pub mod codec;
pub mod config;
pub mod control;
pub mod data;
pub mod diffusion;
pub mod metrics;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;
