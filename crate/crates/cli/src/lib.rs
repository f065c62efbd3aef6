//! Command-line pipeline and HTTP label service for realism fine-tuning of
//! traffic policies.

pub mod manifest;
pub mod pipeline;
pub mod service;

use trafficrlhf_core::Error;

/// Exit status for a failed command: 2 for configuration errors, 3 for
/// missing or malformed data, 4 for failures while running.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
        _ => 4,
    }
}
