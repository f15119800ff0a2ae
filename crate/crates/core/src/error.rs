use thiserror::Error;

/// Errors raised across the library.
///
/// `category()` gives the stable machine-readable tag the CLI prints.
#[derive(Debug, Error)]
pub enum Error {
    #[error("network topology: {0}")]
    Topology(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("linearization is singular: {0}")]
    Singular(String),

    #[error("unknown measurement: {0}")]
    UnknownMeasurement(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("time {t} s is outside the horizon [0, {horizon}] s")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("power flow did not converge: {0}")]
    Divergence(String),

    #[error("oracle did not converge: {0}")]
    OracleNonConvergence(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Topology(_) => "topology",
            Error::Parameter(_) => "validation",
            Error::Singular(_) => "singular",
            Error::UnknownMeasurement(_) => "measurement",
            Error::Dimension(_) => "dimension",
            Error::OutOfHorizon { .. } => "horizon",
            Error::Divergence(_) => "divergence",
            Error::OracleNonConvergence(_) => "oracle",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
