//! Command line and HTTP front end: dataset generation, training, search,
//! evaluation, prediction, duration sweeps and a JSON pricing service.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod workflow;

pub use error::{Result, ServiceError};

/// Sets up logging from `PROBSAINT_LOG` (`error`, `info`, `debug`, ...);
/// defaults to `info`.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("PROBSAINT_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}
