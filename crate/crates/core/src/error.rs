use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// A single rejected input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub kind: IssueKind,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    Parse,
    Validation,
}

impl fmt::Display for LineIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            IssueKind::Parse => "parse error",
            IssueKind::Validation => "validation error",
        };
        write!(f, "line {}: {}: {}", self.line, kind, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// One or more lines of an input file were rejected. Every rejected line is listed.
    #[error("{file}: {}", format_issues(.issues))]
    Input { file: String, issues: Vec<LineIssue> },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("population missing for year {0}")]
    MissingPopulationYear(i32),

    #[error("non-positive exposure {value} at age {age}, year {year}")]
    NonPositiveExposure { age: u32, year: i32, value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("{what} did not converge after {iterations} iterations (last log-likelihoods: {})", tail(.trace))]
    NonConvergence {
        what: String,
        iterations: usize,
        trace: Vec<f64>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonConvergence { .. } | Error::Numeric(_) | Error::RankDeficient(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

fn format_issues(issues: &[LineIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn tail(trace: &[f64]) -> String {
    let start = trace.len().saturating_sub(3);
    trace[start..]
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(", ")
}
