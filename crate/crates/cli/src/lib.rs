//! Command line and HTTP service for the kgdx diagnosis engine.

pub mod backend;
pub mod config;
pub mod service;
