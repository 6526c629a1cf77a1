//! The user-facing client: XML job configuration, program packaging,
//! submission and the status stream.

pub mod config;
pub mod package;
pub mod status;
mod submit;

pub use config::{parse_config, parse_memory, ConfigError, RawConfig};
pub use package::{package, ManifestEntry, PackageError, SubmissionPackage};
pub use status::StatusPrinter;
pub use submit::*;
