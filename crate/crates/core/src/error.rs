use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown reference {0}")]
    UnknownReference(f64),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("LP infeasible (worst row {worst_row}, violation {violation:.3e})")]
    Infeasible { worst_row: usize, violation: f64 },

    #[error("synthesis infeasible for r_bar = {r_bar}: {diagnostics}")]
    SynthesisInfeasible {
        r_bar: f64,
        diagnostics: Box<crate::synthesis::InfeasibilityDiagnostics>,
    },

    #[error("equilibrium for r_bar = {r_bar} violates the constraint (g = {g_value:.6})")]
    InadmissibleEquilibrium { r_bar: f64, g_value: f64 },

    #[error("no admissible reference contains the current state")]
    NoAdmissibleReference,

    #[error("integration failure: {0}")]
    Integration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
