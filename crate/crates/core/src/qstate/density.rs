use std::collections::HashSet;
use std::sync::Arc;

use num_complex::Complex64;

use super::energy::{EnergyVector, FrequencyBasis};
use super::hamiltonian::HamiltonianSpec;
use super::linalg::{self, CMatrix, CVector};
use super::{max_dim, Tolerances};
use crate::error::{Error, Result};

/// A labeled tensor factor of a composite system.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    pub label: String,
    pub hamiltonian: HamiltonianSpec,
}

impl Subsystem {
    pub fn new(label: impl Into<String>, hamiltonian: HamiltonianSpec) -> Self {
        Subsystem {
            label: label.into(),
            hamiltonian,
        }
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }
}

/// A Hermitian, positive semidefinite, unit-trace matrix on a labeled
/// composite system. The matrix is written in the product energy eigenbasis,
/// first subsystem most significant.
#[derive(Debug, Clone)]
pub struct DensityOperator {
    matrix: CMatrix,
    basis: Arc<FrequencyBasis>,
    subsystems: Vec<Subsystem>,
}

fn check_subsystems(basis: &Arc<FrequencyBasis>, subsystems: &[Subsystem]) -> Result<usize> {
    let mut seen = HashSet::new();
    let mut dim: usize = 1;
    for s in subsystems {
        if !seen.insert(s.label.as_str()) {
            return Err(Error::Argument(format!("duplicate subsystem label `{}`", s.label)));
        }
        if !Arc::ptr_eq(s.hamiltonian.basis(), basis) && **s.hamiltonian.basis() != **basis {
            return Err(Error::Argument(format!(
                "subsystem `{}` uses a different frequency basis",
                s.label
            )));
        }
        dim = dim
            .checked_mul(s.dim())
            .ok_or_else(|| Error::ResourceLimit("dimension overflow".into()))?;
    }
    Ok(dim)
}

impl DensityOperator {
    /// Validates Hermiticity, trace and positivity with default tolerances.
    pub fn new(
        matrix: CMatrix,
        basis: Arc<FrequencyBasis>,
        subsystems: Vec<Subsystem>,
    ) -> Result<Self> {
        Self::with_tolerances(matrix, basis, subsystems, &Tolerances::default())
    }

    pub fn with_tolerances(
        matrix: CMatrix,
        basis: Arc<FrequencyBasis>,
        subsystems: Vec<Subsystem>,
        tol: &Tolerances,
    ) -> Result<Self> {
        let dim = check_subsystems(&basis, &subsystems)?;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::Argument(format!(
                "matrix is {}x{}, subsystems give dimension {dim}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidState("matrix has non-finite entries".into()));
        }
        let herm = linalg::hermiticity_residual(&matrix);
        if herm > tol.herm {
            return Err(Error::InvalidState(format!(
                "not Hermitian: residual {herm:.3e}"
            )));
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > tol.trace || tr.im.abs() > tol.trace {
            return Err(Error::InvalidState(format!("trace is {tr}, expected 1")));
        }
        let matrix = linalg::hermitize(&matrix);
        let min = linalg::eigvalsh(&matrix).first().copied().unwrap_or(0.0);
        if min < -tol.psd {
            return Err(Error::InvalidState(format!(
                "not positive semidefinite: eigenvalue {min:.3e}"
            )));
        }
        Ok(DensityOperator {
            matrix,
            basis,
            subsystems,
        })
    }

    /// Single-subsystem state.
    pub fn single(matrix: CMatrix, label: &str, hamiltonian: HamiltonianSpec) -> Result<Self> {
        let basis = hamiltonian.basis().clone();
        Self::new(matrix, basis, vec![Subsystem::new(label, hamiltonian)])
    }

    /// Assembles a state whose validity follows from how it was computed
    /// (outputs of channels applied to valid states).
    pub(crate) fn from_trusted(
        matrix: CMatrix,
        basis: Arc<FrequencyBasis>,
        subsystems: Vec<Subsystem>,
    ) -> Self {
        debug_assert_eq!(
            matrix.nrows(),
            subsystems.iter().map(Subsystem::dim).product::<usize>()
        );
        DensityOperator {
            matrix: linalg::hermitize(&matrix),
            basis,
            subsystems,
        }
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalised) vector.
    pub fn from_pure(
        psi: &CVector,
        basis: Arc<FrequencyBasis>,
        subsystems: Vec<Subsystem>,
    ) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Argument("pure state vector has zero norm".into()));
        }
        let v = psi.unscale(norm);
        Self::new(&v * v.adjoint(), basis, subsystems)
    }

    /// Diagonal state with the given populations.
    pub fn diagonal(
        probs: &[f64],
        basis: Arc<FrequencyBasis>,
        subsystems: Vec<Subsystem>,
    ) -> Result<Self> {
        Self::new(linalg::diag_real(probs), basis, subsystems)
    }

    /// Energy eigenstate `|index⟩⟨index|`.
    pub fn basis_state(
        index: usize,
        basis: Arc<FrequencyBasis>,
        subsystems: Vec<Subsystem>,
    ) -> Result<Self> {
        let dim: usize = subsystems.iter().map(Subsystem::dim).product();
        if index >= dim {
            return Err(Error::Argument(format!("basis index {index} >= dimension {dim}")));
        }
        let mut p = vec![0.0; dim];
        p[index] = 1.0;
        Self::diagonal(&p, basis, subsystems)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn basis(&self) -> &Arc<FrequencyBasis> {
        &self.basis
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn labels(&self) -> Vec<&str> {
        self.subsystems.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(Subsystem::dim).collect()
    }

    /// Total energy of each product basis state, exact.
    pub fn energies(&self) -> Vec<EnergyVector> {
        composite_energies(&self.basis, &self.subsystems)
    }

    pub fn numeric_energies(&self) -> Vec<f64> {
        self.energies().iter().map(|e| e.value(&self.basis)).collect()
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.matrix[(i, i)].re).collect()
    }

    pub fn mean_energy(&self) -> f64 {
        self.numeric_energies()
            .iter()
            .zip(self.populations())
            .map(|(e, p)| e * p)
            .sum()
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::eigvalsh(&self.matrix)
    }

    /// Returns a copy with subsystem labels replaced (same order and count).
    pub fn relabeled(&self, labels: &[&str]) -> Result<Self> {
        if labels.len() != self.subsystems.len() {
            return Err(Error::Argument(format!(
                "expected {} labels, got {}",
                self.subsystems.len(),
                labels.len()
            )));
        }
        let subsystems: Vec<Subsystem> = self
            .subsystems
            .iter()
            .zip(labels)
            .map(|(s, l)| Subsystem::new(*l, s.hamiltonian.clone()))
            .collect();
        check_subsystems(&self.basis, &subsystems)?;
        Ok(DensityOperator {
            matrix: self.matrix.clone(),
            basis: self.basis.clone(),
            subsystems,
        })
    }

    /// Same matrix and labels, checked against another system description.
    pub fn same_system(&self, other: &DensityOperator) -> bool {
        self.subsystems == other.subsystems
    }
}

/// Exact total energy of each product basis state of `subsystems`.
pub(crate) fn composite_energies(
    basis: &FrequencyBasis,
    subsystems: &[Subsystem],
) -> Vec<EnergyVector> {
    let mut out = vec![EnergyVector::zero(basis.len())];
    for s in subsystems {
        let local = s.hamiltonian.energies();
        let mut next = Vec::with_capacity(out.len() * local.len());
        for e in &out {
            for l in &local {
                next.push(e + l);
            }
        }
        out = next;
    }
    out
}

/// `e^{−βH}/Z` for a single Hamiltonian, labeled `S`.
pub fn gibbs_state(h: &HamiltonianSpec, beta: f64) -> Result<DensityOperator> {
    gibbs_state_of(h.basis().clone(), vec![Subsystem::new("S", h.clone())], beta)
}

/// Gibbs state of a composite system with total Hamiltonian `Σ_k H_k`.
pub fn gibbs_state_of(
    basis: Arc<FrequencyBasis>,
    subsystems: Vec<Subsystem>,
    beta: f64,
) -> Result<DensityOperator> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::Argument(format!("beta must be finite and positive, got {beta}")));
    }
    let dim = check_subsystems(&basis, &subsystems)?;
    if dim > max_dim() {
        return Err(Error::ResourceLimit(format!("dimension {dim} exceeds cap {}", max_dim())));
    }
    let weights = gibbs_weights(&composite_numeric(&basis, &subsystems), beta)?;
    Ok(DensityOperator::from_trusted(
        linalg::diag_real(&weights),
        basis,
        subsystems,
    ))
}

fn composite_numeric(basis: &FrequencyBasis, subsystems: &[Subsystem]) -> Vec<f64> {
    composite_energies(basis, subsystems)
        .iter()
        .map(|e| e.value(basis))
        .collect()
}

/// Normalised Boltzmann weights, computed relative to the ground energy.
pub(crate) fn gibbs_weights(energies: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::Argument(format!("beta must be finite and positive, got {beta}")));
    }
    let ground = energies.iter().copied().fold(f64::INFINITY, f64::min);
    if !ground.is_finite() {
        return Err(Error::NumericRange("non-finite energy".into()));
    }
    let w: Vec<f64> = energies.iter().map(|e| (-beta * (e - ground)).exp()).collect();
    let z: f64 = w.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::NumericRange(format!("partition function {z} out of range")));
    }
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Kronecker product; labels are concatenated and must stay unique.
pub fn tensor(a: &DensityOperator, b: &DensityOperator) -> Result<DensityOperator> {
    if **a.basis() != **b.basis() {
        return Err(Error::Argument("tensor factors use different frequency bases".into()));
    }
    let dim = a
        .dim()
        .checked_mul(b.dim())
        .ok_or_else(|| Error::ResourceLimit("dimension overflow".into()))?;
    if dim > max_dim() {
        return Err(Error::ResourceLimit(format!(
            "tensor dimension {dim} exceeds cap {}",
            max_dim()
        )));
    }
    let mut subsystems = a.subsystems.clone();
    subsystems.extend(b.subsystems.iter().cloned());
    check_subsystems(&a.basis, &subsystems)?;
    Ok(DensityOperator {
        matrix: linalg::kron(&a.matrix, &b.matrix),
        basis: a.basis.clone(),
        subsystems,
    })
}

/// `ρ^{⊗n}` with each copy's labels suffixed by its 1-based copy index.
pub fn tensor_power(rho: &DensityOperator, n: usize) -> Result<DensityOperator> {
    if n == 0 {
        return Err(Error::Argument("tensor power needs n >= 1".into()));
    }
    let copy = |k: usize| -> Result<DensityOperator> {
        let labels: Vec<String> = rho.labels().iter().map(|l| format!("{l}{k}")).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        rho.relabeled(&refs)
    };
    let mut out = copy(1)?;
    for k in 2..=n {
        out = tensor(&out, &copy(k)?)?;
    }
    Ok(out)
}

/// Traces out every subsystem whose label is not in `keep`.
pub fn partial_trace(rho: &DensityOperator, keep: &[&str]) -> Result<DensityOperator> {
    if keep.is_empty() {
        return Err(Error::Argument("keep set must be nonempty".into()));
    }
    let labels = rho.labels();
    for k in keep {
        if !labels.contains(k) {
            return Err(Error::Argument(format!("unknown subsystem label `{k}`")));
        }
    }
    let kept: Vec<bool> = labels.iter().map(|l| keep.contains(l)).collect();
    let dims = rho.dims();
    let matrix = partial_trace_matrix(&rho.matrix, &dims, &kept);
    let subsystems = rho
        .subsystems
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(DensityOperator::from_trusted(
        matrix,
        rho.basis.clone(),
        subsystems,
    ))
}

/// Partial trace on a raw matrix: keeps the factors flagged in `kept`.
pub(crate) fn partial_trace_matrix(m: &CMatrix, dims: &[usize], kept: &[bool]) -> CMatrix {
    let n = m.nrows();
    let kept_dim: usize = dims.iter().zip(kept).filter(|(_, &k)| k).map(|(d, _)| d).product();
    let traced_dim = n / kept_dim.max(1);
    // For every flat index, its (kept, traced) coordinates.
    let mut kept_of = vec![0usize; n];
    let mut traced_of = vec![0usize; n];
    for (idx, (ko, to)) in kept_of.iter_mut().zip(traced_of.iter_mut()).enumerate() {
        let mut rem = idx;
        let mut kstride = 1;
        let mut tstride = 1;
        for (d, &k) in dims.iter().zip(kept).rev() {
            let digit = rem % d;
            rem /= d;
            if k {
                *ko += digit * kstride;
                kstride *= d;
            } else {
                *to += digit * tstride;
                tstride *= d;
            }
        }
    }
    let mut groups = vec![vec![0usize; kept_dim]; traced_dim];
    for idx in 0..n {
        groups[traced_of[idx]][kept_of[idx]] = idx;
    }
    let mut out = CMatrix::zeros(kept_dim, kept_dim);
    for g in &groups {
        for (b, &j) in g.iter().enumerate() {
            for (a, &i) in g.iter().enumerate() {
                out[(a, b)] += m[(i, j)];
            }
        }
    }
    out
}

fn clipped_entropy(eigs: &[f64]) -> f64 {
    eigs.iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| -l * l.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Von Neumann entropy in nats; eigenvalues in `[−tol_psd, 0)` count as 0.
pub fn entropy(rho: &DensityOperator) -> f64 {
    clipped_entropy(&rho.eigenvalues())
}

/// `Tr ρ(log ρ − log σ)` in nats, or `+∞` when the support of `rho` is not
/// contained in the support of `sigma`.
pub fn relative_entropy(rho: &DensityOperator, sigma: &DensityOperator) -> f64 {
    assert_eq!(rho.dim(), sigma.dim(), "relative entropy of mismatched dimensions");
    let tol = Tolerances::default().psd;
    let neg_s = -clipped_entropy(&rho.eigenvalues());
    let (svals, svecs) = linalg::eigh(&sigma.matrix);
    let mut cross = 0.0;
    for (k, &s) in svals.iter().enumerate() {
        let v = svecs.column(k);
        let w: Complex64 = (v.adjoint() * &rho.matrix * v)[(0, 0)];
        let weight = w.re;
        if s <= tol {
            if weight > tol {
                return f64::INFINITY;
            }
            continue;
        }
        cross += weight * s.ln();
    }
    (neg_s - cross).max(0.0)
}

/// Nonequilibrium free energy `Tr(ρH) − S(ρ)/β`, using the state's own
/// Hamiltonian.
pub fn free_energy(rho: &DensityOperator, beta: f64) -> f64 {
    rho.mean_energy() - entropy(rho) / beta
}

/// Half the trace norm of `a − b`.
pub fn trace_distance(a: &DensityOperator, b: &DensityOperator) -> f64 {
    assert_eq!(a.dim(), b.dim(), "trace distance of mismatched dimensions");
    matrix_trace_distance(&a.matrix, &b.matrix)
}

pub(crate) fn matrix_trace_distance(a: &CMatrix, b: &CMatrix) -> f64 {
    (0.5 * linalg::trace_norm_hermitian(&(a - b))).clamp(0.0, 1.0)
}
