//! Command-line front end and HTTP service for what-if process simulation.

pub mod cli;
pub mod server;
pub mod session;
