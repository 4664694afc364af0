//! HTTP service, CLI plumbing and gateway setup for the zagii engine.

pub mod api;
pub mod backend;
pub mod repl;
