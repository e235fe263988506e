//! Command line pipeline and HTTP service over the core models.

pub mod app;
pub mod error;
pub mod pipeline;
pub mod registry;
pub mod service;
pub mod workspace;
