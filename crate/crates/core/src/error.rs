use thiserror::Error;

/// One invariant violation found while validating a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {}", join_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("config: {0}")]
    Parse(String),

    #[error("matops: matrix contains non-finite entries")]
    NonFinite,

    #[error("matops: QR iteration did not converge after {iterations} iterations")]
    EigenNoConvergence { iterations: usize },

    #[error("kernels: successive approximation did not converge in {iterations} sweeps (last change {last_change:e})")]
    KernelNoConvergence { iterations: usize, last_change: f64 },

    #[error("transforms: Neumann series did not converge in {iterations} iterations (last change {last_change:e})")]
    ResolventNoConvergence { iterations: usize, last_change: f64 },

    #[error("{module}: grid mismatch: {detail}")]
    GridMismatch { module: &'static str, detail: String },

    #[error("simulator: CFL condition violated (courant number {courant})")]
    Cfl { courant: f64 },

    #[error("simulator: state diverged at step {step} (t = {t}); |state| exceeded 1e12 or became non-finite")]
    Diverged { step: usize, t: f64 },

    #[error("transforms: trajectory has {0} stored snapshots, need at least 2")]
    ShortTrajectory(usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config(vec![ConfigIssue {
            field: field.into(),
            message: message.into(),
        }])
    }

    /// Process exit code: 2 for configuration problems, 1 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Cfl { .. } | Error::GridMismatch { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
