//! CLI and HTTP service on top of `gmmscope-core`.

pub mod api;
pub mod cli;
pub mod state;
