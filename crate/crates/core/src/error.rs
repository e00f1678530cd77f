use thiserror::Error;

use crate::space::ConfigKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op} requires a {expected} layer, got {actual}")]
    KindMismatch {
        op: &'static str,
        expected: &'static str,
        actual: String,
    },

    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {stage}: expected {expected:?}, got {actual:?}")]
    Shape {
        stage: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("no BN statistics for {0}; calibrate this configuration first")]
    CalibrationRequired(ConfigKey),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("budget of {budget} FLOPs is below the cheapest configuration ({min} FLOPs)")]
    BudgetInfeasible { budget: f64, min: u64 },

    #[error("{config}: {source}")]
    AtConfig {
        config: ConfigKey,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, config: ConfigKey) -> Self {
        Error::AtConfig {
            config,
            source: Box::new(self),
        }
    }
}
