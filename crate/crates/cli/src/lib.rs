//! Command-line front end and console gateway.

pub mod app;
pub mod fiducials;
pub mod gateway;
