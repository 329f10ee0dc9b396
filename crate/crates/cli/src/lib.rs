//! Command implementations behind the `retinareg` binary. Each command is a
//! plain function so it can be driven in-process as well.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod extract;
pub mod register;
pub mod synth;
pub mod train;

pub use config::{load_config, Backend, PipelineConfig, SynthDatasetConfig, TrainToyConfig};
pub use error::{CliError, Result};
pub use evaluate::{cmd_evaluate, Manifest, ManifestEntry};
pub use extract::cmd_extract;
pub use register::{cmd_register, RegisterArgs};
pub use synth::cmd_synth;
pub use train::cmd_train_toy;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "RETINAREG_THREADS";
