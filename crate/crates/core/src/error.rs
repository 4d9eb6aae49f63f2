use crate::stats::StatsError;

/// Coarse classification used at the service boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Validation,
    IllegalTransition,
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid regular expression at offset {offset}: {message}")]
    InvalidRegex { offset: usize, message: String },
    #[error("cannot recompute from pre-aggregated data: {}", .0.join(", "))]
    CannotRecompute(Vec<String>),
    #[error("illegal transition: change point {id} is {current}, cannot apply {action}")]
    IllegalTransition { id: String, current: String, action: String },
    #[error("version conflict on {id}: expected {expected}, found {found}")]
    VersionConflict { id: String, expected: u64, found: u64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("storage error: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal corrupt at line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NotFound(_) => ErrorKind::NotFound,
            Error::Conflict(_) | Error::VersionConflict { .. } => ErrorKind::Conflict,
            Error::Validation(_) | Error::InvalidRegex { .. } | Error::CannotRecompute(_) | Error::Stats(_) => {
                ErrorKind::Validation
            }
            Error::IllegalTransition { .. } => ErrorKind::IllegalTransition,
            Error::Io(_) | Error::Journal { .. } | Error::Internal(_) => ErrorKind::Internal,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Compiles a regex, reporting the byte offset of a syntax error.
pub fn compile_regex(pattern: &str) -> Result<regex::Regex> {
    if let Err(err) = regex_syntax::Parser::new().parse(pattern) {
        let (offset, message) = match &err {
            regex_syntax::Error::Parse(e) => (e.span().start.offset, e.kind().to_string()),
            regex_syntax::Error::Translate(e) => (e.span().start.offset, e.kind().to_string()),
            other => (0, other.to_string()),
        };
        return Err(Error::InvalidRegex { offset, message });
    }
    regex::Regex::new(pattern).map_err(|e| Error::InvalidRegex { offset: 0, message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regex_error_reports_offset() {
        match compile_regex("Latency(50|95") {
            Err(Error::InvalidRegex { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(compile_regex("Latency(50|95)thPercentile").is_ok());
    }
}
