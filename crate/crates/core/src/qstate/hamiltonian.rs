use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::energy::{EnergyVector, FrequencyBasis};
use crate::error::{Error, Result};

/// One energy level and its degeneracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub energy: EnergyVector,
    #[serde(default = "one")]
    pub degeneracy: usize,
}

fn one() -> usize {
    1
}

/// A diagonal Hamiltonian given as an ordered list of exact levels.
///
/// Levels are in nondecreasing numeric order. A spectrum whose ground energy
/// is negative is shifted so the ground energy becomes zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec {
    basis: Arc<FrequencyBasis>,
    levels: Vec<Level>,
}

impl HamiltonianSpec {
    pub fn new(basis: Arc<FrequencyBasis>, levels: Vec<Level>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Argument("Hamiltonian needs at least one level".into()));
        }
        for (i, level) in levels.iter().enumerate() {
            if level.energy.len() != basis.len() {
                return Err(Error::Argument(format!(
                    "level {i} has {} coefficients, basis has {}",
                    level.energy.len(),
                    basis.len()
                )));
            }
            if level.degeneracy == 0 {
                return Err(Error::Argument(format!("level {i} has zero degeneracy")));
            }
        }
        let values: Vec<f64> = levels.iter().map(|l| l.energy.value(&basis)).collect();
        if let Some(i) = values.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Argument(format!(
                "levels must be in nondecreasing order; level {} ({}) is below level {} ({})",
                i + 1,
                values[i + 1],
                i,
                values[i]
            )));
        }
        let mut levels = levels;
        if values[0] < 0.0 {
            let ground = levels[0].energy.clone();
            for level in &mut levels {
                level.energy = &level.energy - &ground;
            }
        }
        Ok(HamiltonianSpec { basis, levels })
    }

    /// Nondegenerate levels with the given energies.
    pub fn from_energies(basis: Arc<FrequencyBasis>, energies: Vec<EnergyVector>) -> Result<Self> {
        Self::new(
            basis,
            energies
                .into_iter()
                .map(|energy| Level {
                    energy,
                    degeneracy: 1,
                })
                .collect(),
        )
    }

    /// Truncated half-infinite ladder: levels `0, unit, 2·unit, …, (count−1)·unit`.
    pub fn ladder(basis: Arc<FrequencyBasis>, unit: &EnergyVector, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Argument("ladder needs at least one level".into()));
        }
        if unit.value(&basis) <= 0.0 {
            return Err(Error::Argument("ladder spacing must be positive".into()));
        }
        Self::from_energies(
            basis,
            (0..count).map(|k| unit.scale_i64(k as i64)).collect(),
        )
    }

    /// A flat Hamiltonian (all energies zero) of the given dimension.
    pub fn flat(basis: Arc<FrequencyBasis>, dim: usize) -> Result<Self> {
        let zero = EnergyVector::zero(basis.len());
        Self::new(
            basis,
            vec![Level {
                energy: zero,
                degeneracy: dim,
            }],
        )
    }

    pub fn basis(&self) -> &Arc<FrequencyBasis> {
        &self.basis
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels.iter().map(|l| l.degeneracy).sum()
    }

    /// One energy per basis state (levels expanded by degeneracy).
    pub fn energies(&self) -> Vec<EnergyVector> {
        self.levels
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.energy.clone(), l.degeneracy))
            .collect()
    }

    pub fn numeric_energies(&self) -> Vec<f64> {
        self.levels
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.energy.value(&self.basis), l.degeneracy))
            .collect()
    }
}
