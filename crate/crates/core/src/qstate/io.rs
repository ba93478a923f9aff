//! JSON file formats for Hamiltonians, matrices and states.
//!
//! A state file looks like
//!
//! ```json
//! {
//!   "dim": 2,
//!   "entries": [[0.5, 0.0], [0.5, 0.0], [0.5, 0.0], [0.5, 0.0]],
//!   "hamiltonian": {
//!     "basis": [{"name": "w", "value": 1.0}],
//!     "levels": [{"energy": ["0"]}, {"energy": ["1"]}]
//!   }
//! }
//! ```
//!
//! Entries are row-major `[re, im]` pairs and energy coefficients are exact
//! rationals written as `"p/q"` strings. A composite system replaces
//! `levels` by `subsystems: [{"label": .., "levels": [..]}, ..]`.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::density::{DensityOperator, Subsystem};
use super::energy::FrequencyBasis;
use super::hamiltonian::{HamiltonianSpec, Level};
use super::linalg::CMatrix;
use crate::error::{Error, Result};

/// Label given to the subsystem of a single-Hamiltonian state file.
pub const DEFAULT_LABEL: &str = "S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemJson {
    pub label: String,
    pub levels: Vec<Level>,
}

/// Hamiltonian block of a state file, or a standalone Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianJson {
    pub basis: FrequencyBasis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<Level>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsystems: Option<Vec<SubsystemJson>>,
}

impl HamiltonianJson {
    pub fn from_spec(h: &HamiltonianSpec) -> Self {
        HamiltonianJson {
            basis: (**h.basis()).clone(),
            levels: Some(h.levels().to_vec()),
            subsystems: None,
        }
    }

    pub(crate) fn from_subsystems(basis: &FrequencyBasis, subsystems: &[Subsystem]) -> Self {
        if subsystems.len() == 1 && subsystems[0].label == DEFAULT_LABEL {
            return HamiltonianJson {
                basis: basis.clone(),
                levels: Some(subsystems[0].hamiltonian.levels().to_vec()),
                subsystems: None,
            };
        }
        HamiltonianJson {
            basis: basis.clone(),
            levels: None,
            subsystems: Some(
                subsystems
                    .iter()
                    .map(|s| SubsystemJson {
                        label: s.label.clone(),
                        levels: s.hamiltonian.levels().to_vec(),
                    })
                    .collect(),
            ),
        }
    }

    /// The single Hamiltonian described (composite descriptions are rejected).
    pub fn to_spec(&self) -> Result<HamiltonianSpec> {
        let (_, mut subsystems) = self.to_subsystems()?;
        if subsystems.len() != 1 {
            return Err(Error::Argument("expected a single Hamiltonian, got subsystems".into()));
        }
        Ok(subsystems.remove(0).hamiltonian)
    }

    pub fn to_subsystems(&self) -> Result<(Arc<FrequencyBasis>, Vec<Subsystem>)> {
        let basis = Arc::new(self.basis.clone());
        let subsystems = match (&self.levels, &self.subsystems) {
            (Some(levels), None) => vec![Subsystem::new(
                DEFAULT_LABEL,
                HamiltonianSpec::new(basis.clone(), levels.clone())?,
            )],
            (None, Some(subs)) => subs
                .iter()
                .map(|s| {
                    Ok(Subsystem::new(
                        s.label.clone(),
                        HamiltonianSpec::new(basis.clone(), s.levels.clone())?,
                    ))
                })
                .collect::<Result<_>>()?,
            _ => {
                return Err(Error::Argument(
                    "hamiltonian needs exactly one of `levels` or `subsystems`".into(),
                ))
            }
        };
        Ok((basis, subsystems))
    }
}

/// Row-major `[re, im]` pairs.
pub fn matrix_to_entries(m: &CMatrix) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            out.push([z.re, z.im]);
        }
    }
    out
}

/// Square matrix from row-major `[re, im]` pairs.
pub fn entries_to_matrix(entries: &[[f64; 2]]) -> Result<CMatrix> {
    let n = (entries.len() as f64).sqrt().round() as usize;
    if n * n != entries.len() {
        return Err(Error::Argument(format!(
            "{} entries do not form a square matrix",
            entries.len()
        )));
    }
    Ok(CMatrix::from_fn(n, n, |i, j| {
        let [re, im] = entries[i * n + j];
        Complex64::new(re, im)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateJson {
    pub dim: usize,
    pub entries: Vec<[f64; 2]>,
    pub hamiltonian: HamiltonianJson,
}

impl StateJson {
    pub fn from_state(rho: &DensityOperator) -> Self {
        StateJson {
            dim: rho.dim(),
            entries: matrix_to_entries(rho.matrix()),
            hamiltonian: HamiltonianJson::from_subsystems(rho.basis(), rho.subsystems()),
        }
    }

    pub fn to_state(&self) -> Result<DensityOperator> {
        if self.entries.len() != self.dim * self.dim {
            return Err(Error::Argument(format!(
                "dim {} needs {} entries, got {}",
                self.dim,
                self.dim * self.dim,
                self.entries.len()
            )));
        }
        let m = entries_to_matrix(&self.entries)?;
        let (basis, subsystems) = self.hamiltonian.to_subsystems()?;
        DensityOperator::new(m, basis, subsystems)
    }
}

impl Serialize for DensityOperator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StateJson::from_state(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityOperator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        StateJson::deserialize(d)?
            .to_state()
            .map_err(serde::de::Error::custom)
    }
}

impl Serialize for HamiltonianSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HamiltonianJson::from_spec(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for HamiltonianSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        HamiltonianJson::deserialize(d)?
            .to_spec()
            .map_err(serde::de::Error::custom)
    }
}

pub fn state_from_str(s: &str) -> Result<DensityOperator> {
    let parsed: StateJson = serde_json::from_str(s)?;
    parsed.to_state()
}

pub fn state_to_string(rho: &DensityOperator) -> Result<String> {
    Ok(serde_json::to_string_pretty(&StateJson::from_state(rho))?)
}

pub fn read_state(path: &Path) -> Result<DensityOperator> {
    state_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{gibbs_state, tensor, EnergyVector};

    const PLUS: &str = r#"{
        "dim": 2,
        "entries": [[0.5, 0.0], [0.5, 0.0], [0.5, 0.0], [0.5, 0.0]],
        "hamiltonian": {
            "basis": [{"name": "w", "value": 1.0}],
            "levels": [{"energy": ["0"]}, {"energy": ["1"]}]
        }
    }"#;

    #[test]
    fn parses_plus_state() {
        let rho = state_from_str(PLUS).unwrap();
        assert_eq!(rho.dim(), 2);
        assert_eq!(rho.labels(), vec!["S"]);
        assert_eq!(rho.energies()[1], EnergyVector::from_ints(&[1]));
    }

    #[test]
    fn round_trips() {
        let rho = state_from_str(PLUS).unwrap();
        let text = state_to_string(&rho).unwrap();
        let back = state_from_str(&text).unwrap();
        assert_eq!(back.matrix(), rho.matrix());
        assert_eq!(back.subsystems(), rho.subsystems());

        let b = rho.basis().clone();
        let h = HamiltonianSpec::from_energies(
            b,
            vec![EnergyVector::from_ratios(&[(0, 1)]), EnergyVector::from_ratios(&[(3, 2)])],
        )
        .unwrap();
        let g = gibbs_state(&h, 1.0).unwrap().relabeled(&["B"]).unwrap();
        let composite = tensor(&rho.relabeled(&["A"]).unwrap(), &g).unwrap();
        let text = state_to_string(&composite).unwrap();
        assert!(text.contains("3/2"));
        let back = state_from_str(&text).unwrap();
        assert_eq!(back.labels(), vec!["A", "B"]);
        assert_eq!(back.matrix(), composite.matrix());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_shapes() {
        let extra = PLUS.replacen("\"dim\": 2,", "\"dim\": 2, \"color\": 1,", 1);
        assert!(state_from_str(&extra).is_err());
        let short = PLUS.replacen("\"dim\": 2", "\"dim\": 3", 1);
        assert!(state_from_str(&short).is_err());
    }
}
