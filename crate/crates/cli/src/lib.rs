//! Command-line interface, HTTP service and simulation harness for the
//! co-construction engine.

pub mod cli;
pub mod config;
pub mod error;
pub mod service;
pub mod simulate;
pub mod store;

pub use error::ErrorEnvelope;

/// Installs a stderr logger filtered by `level` (an env-filter directive).
pub fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(level).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
