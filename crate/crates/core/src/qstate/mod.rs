//! States, Hamiltonians, composition and entropic functionals.

pub(crate) mod density;
mod energy;
mod hamiltonian;
pub mod io;
pub mod linalg;

pub use density::{
    entropy, free_energy, gibbs_state, gibbs_state_of, partial_trace, relative_entropy, tensor,
    tensor_power, trace_distance, DensityOperator, Subsystem,
};
pub use energy::{EnergyVector, Frequency, FrequencyBasis};
pub use hamiltonian::{HamiltonianSpec, Level};

/// Default dimension cap for composite systems.
pub const DEFAULT_MAX_DIM: usize = 1 << 14;

/// Environment variable overriding [`DEFAULT_MAX_DIM`].
pub const MAX_DIM_ENV: &str = "THERMOOPS_MAX_DIM";

/// Dimension cap in effect: `THERMOOPS_MAX_DIM` if set and parseable, else 2^14.
pub fn max_dim() -> usize {
    std::env::var(MAX_DIM_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_MAX_DIM)
}

/// Numerical tolerances used when validating states and operators.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub herm: f64,
    pub trace: f64,
    pub psd: f64,
    /// Energy-conservation residual accepted for intertwining checks.
    pub ec: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            herm: 1e-10,
            trace: 1e-10,
            psd: 1e-9,
            ec: 1e-9,
        }
    }
}
