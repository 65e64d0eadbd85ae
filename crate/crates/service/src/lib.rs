//! Command-line pipeline and HTTP session service.

pub mod api;
pub mod cli;
pub mod config;
pub mod session;
pub mod turn;
