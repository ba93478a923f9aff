use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric range error: {0}")]
    NumericRange(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("operator is not energy conserving: residual {residual:.3e} exceeds {tolerance:.3e}")]
    EnergyConservation { residual: f64, tolerance: f64 },

    #[error("operator is not unitary: residual {residual:.3e} exceeds {tolerance:.3e}")]
    NotUnitary { residual: f64, tolerance: f64 },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("classical conversion infeasible: {0}")]
    Infeasible(String),

    #[error("walk has non-positive drift {drift:.6e}; hitting bound does not apply")]
    NoRoot { drift: f64 },

    #[error("no admissible target energy for eigenvector {eigenvector}: {detail}")]
    TargetWindow { eigenvector: usize, detail: String },

    #[error("catalyst not returned exactly: residual {residual:.3e} exceeds {tolerance:.3e}")]
    CatalystResidual { residual: f64, tolerance: f64 },

    #[error("free-energy order violated: F(rho) = {f_rho:.12} is not above F(rho') = {f_target:.12}")]
    FreeEnergyOrder { f_rho: f64, f_target: f64 },

    #[error("resonant-mode condition fails: a coherent mode of the target is not an integer combination of the input's modes")]
    ModeCondition,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
