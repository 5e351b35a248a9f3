//! Exit codes.

use std::fmt;

use domus_core::error::CoreError;
use domus_nn::NnError;

pub const SUCCESS: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

/// Bad flags or configuration values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps an error chain to an exit code; anything unrecognised is a data error.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::NonFinite(_) | CoreError::Nn(NnError::NonFinite { .. }) => NUMERIC,
                CoreError::Config(_) => USAGE,
                _ => DATA,
            };
        }
        if let Some(NnError::NonFinite { .. }) = cause.downcast_ref::<NnError>() {
            return NUMERIC;
        }
    }
    DATA
}
