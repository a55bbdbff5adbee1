//! Process exit codes by error family.

use std::fmt;

pub const CONFIG: i32 = 1;
pub const IO: i32 = 2;
pub const NUMERICAL: i32 = 3;
pub const DIVERGENCE: i32 = 4;

/// A problem with flags, configuration files, or input contents.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A run that completed but whose checks did not hold.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn code_for(err: &anyhow::Error) -> i32 {
    use freemcg_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. } => DIVERGENCE,
                E::Numerical(_) => NUMERICAL,
                E::InvalidInput(_) | E::DimensionMismatch { .. } | E::InvalidParameter(_) | E::Format(_) => CONFIG,
            };
        }
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return CONFIG;
        }
        if cause.is::<CheckFailed>() {
            return NUMERICAL;
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    CONFIG
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn families() {
        let div: anyhow::Error = freemcg_core::Error::Divergence { step: 1, norm: 1e9, limit: 1e3 }.into();
        assert_eq!(code_for(&div), DIVERGENCE);
        let num: anyhow::Error = freemcg_core::Error::Numerical("x".into()).into();
        assert_eq!(code_for(&num.context("while running")), NUMERICAL);
        let io: anyhow::Error = std::io::Error::new(std::io::ErrorKind::NotFound, "gone").into();
        assert_eq!(code_for(&io), IO);
        let cfg = Err::<(), _>(ConfigError("bad".into())).context("outer").unwrap_err();
        assert_eq!(code_for(&cfg), CONFIG);
        assert_eq!(code_for(&CheckFailed("no".into()).into()), NUMERICAL);
    }
}
