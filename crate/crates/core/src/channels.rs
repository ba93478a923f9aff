//! Thermal operations, pinching and structural checks on channels.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qstate::density::{composite_energies, gibbs_weights, matrix_trace_distance, partial_trace_matrix};
use crate::qstate::io::{entries_to_matrix, matrix_to_entries};
use crate::qstate::linalg::{self, CMatrix, CVector};
use crate::qstate::{
    gibbs_state_of, trace_distance, DensityOperator, EnergyVector, FrequencyBasis,
    HamiltonianSpec, Subsystem, Tolerances,
};

/// A map on density operators.
pub trait Channel {
    fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator>;
}

/// Channel given by a closure.
pub struct FnChannel<F>(pub F);

impl<F> Channel for FnChannel<F>
where
    F: Fn(&DensityOperator) -> Result<DensityOperator>,
{
    fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        (self.0)(rho)
    }
}

/// Serialized form of a thermal operation: environment, temperature and the
/// joint unitary on system ⊗ environment. The system Hamiltonian is supplied
/// when the spec is bound to a system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalOperationSpec {
    pub env: HamiltonianSpec,
    pub beta: f64,
    /// Row-major `[re, im]` pairs.
    pub unitary: Vec<[f64; 2]>,
    /// Output system Hamiltonian when it differs from the input one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<HamiltonianSpec>,
}

impl ThermalOperationSpec {
    /// Validates the spec against a system description.
    pub fn bind(&self, basis: &Arc<FrequencyBasis>, system: &[Subsystem]) -> Result<ThermalOperation> {
        let v = entries_to_matrix(&self.unitary)?;
        let output = match &self.output {
            None => system.to_vec(),
            Some(h) => {
                if system.len() != 1 {
                    return Err(Error::Argument(
                        "an output Hamiltonian needs a single-subsystem input".into(),
                    ));
                }
                vec![Subsystem::new(system[0].label.clone(), h.clone())]
            }
        };
        ThermalOperation::with_output(
            basis.clone(),
            system.to_vec(),
            output,
            self.env.clone(),
            self.beta,
            v,
            &Tolerances::default(),
        )
    }
}

/// `ρ ↦ Tr_E[V (ρ ⊗ τ_E) V†]` for an energy-conserving `V`.
#[derive(Debug, Clone)]
pub struct ThermalOperation {
    basis: Arc<FrequencyBasis>,
    input: Vec<Subsystem>,
    output: Vec<Subsystem>,
    env: HamiltonianSpec,
    beta: f64,
    v: CMatrix,
    tau_env: Vec<f64>,
    residual: f64,
}

impl ThermalOperation {
    pub fn new(
        basis: Arc<FrequencyBasis>,
        system: Vec<Subsystem>,
        env: HamiltonianSpec,
        beta: f64,
        v: CMatrix,
    ) -> Result<Self> {
        let output = system.clone();
        Self::with_output(basis, system, output, env, beta, v, &Tolerances::default())
    }

    /// Partial isometry onto a system with a different Hamiltonian of the
    /// same dimension.
    pub fn with_output(
        basis: Arc<FrequencyBasis>,
        input: Vec<Subsystem>,
        output: Vec<Subsystem>,
        env: HamiltonianSpec,
        beta: f64,
        v: CMatrix,
        tol: &Tolerances,
    ) -> Result<Self> {
        let d_in: usize = input.iter().map(Subsystem::dim).product();
        let d_out: usize = output.iter().map(Subsystem::dim).product();
        if d_in != d_out {
            return Err(Error::Argument(format!(
                "input dimension {d_in} and output dimension {d_out} differ; embed first"
            )));
        }
        let d = d_in * env.dim();
        if v.nrows() != d || v.ncols() != d {
            return Err(Error::Argument(format!(
                "unitary is {}x{}, expected {d}x{d}",
                v.nrows(),
                v.ncols()
            )));
        }
        let u_res = linalg::unitarity_residual(&v);
        if u_res > tol.ec {
            return Err(Error::NotUnitary {
                residual: u_res,
                tolerance: tol.ec,
            });
        }
        let e_in = joint_numeric(&basis, &input, &env);
        let e_out = joint_numeric(&basis, &output, &env);
        let residual = check_energy_conserving(&v, &e_in, &e_out)?;
        if residual > tol.ec {
            return Err(Error::EnergyConservation {
                residual,
                tolerance: tol.ec,
            });
        }
        let tau_env = gibbs_weights(&env.numeric_energies(), beta)?;
        Ok(ThermalOperation {
            basis,
            input,
            output,
            env,
            beta,
            v,
            tau_env,
            residual,
        })
    }

    /// Random thermal operation: blockwise Haar unitary on the total-energy
    /// eigenspaces of system ⊗ environment.
    pub fn random<R: Rng + ?Sized>(
        basis: Arc<FrequencyBasis>,
        system: Vec<Subsystem>,
        env: HamiltonianSpec,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut all = system.clone();
        all.push(Subsystem::new("\u{0}env", env.clone()));
        let v = random_energy_conserving_unitary(&composite_energies(&basis, &all), rng);
        Self::new(basis, system, env, beta, v)
    }

    pub fn unitary(&self) -> &CMatrix {
        &self.v
    }

    pub fn env(&self) -> &HamiltonianSpec {
        &self.env
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn input(&self) -> &[Subsystem] {
        &self.input
    }

    pub fn output(&self) -> &[Subsystem] {
        &self.output
    }

    /// Energy-conservation residual measured at construction.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn to_spec(&self) -> ThermalOperationSpec {
        ThermalOperationSpec {
            env: self.env.clone(),
            beta: self.beta,
            unitary: matrix_to_entries(&self.v),
            output: (self.output != self.input && self.output.len() == 1)
                .then(|| self.output[0].hamiltonian.clone()),
        }
    }
}

impl Channel for ThermalOperation {
    fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        if rho.subsystems() != self.input.as_slice() {
            return Err(Error::Argument(
                "state does not live on the channel's input system".into(),
            ));
        }
        let joint = linalg::kron(rho.matrix(), &linalg::diag_real(&self.tau_env));
        let evolved = &self.v * joint * self.v.adjoint();
        let d_s = rho.dim();
        let out = partial_trace_matrix(&evolved, &[d_s, self.env.dim()], &[true, false]);
        Ok(DensityOperator::from_trusted(
            out,
            self.basis.clone(),
            self.output.clone(),
        ))
    }
}

fn joint_numeric(basis: &FrequencyBasis, system: &[Subsystem], env: &HamiltonianSpec) -> Vec<f64> {
    let mut all = system.to_vec();
    all.push(Subsystem::new("\u{0}env", env.clone()));
    composite_energies(basis, &all)
        .iter()
        .map(|e| e.value(basis))
        .collect()
}

/// Indices grouped by exact energy, groups in order of first appearance.
pub(crate) fn energy_blocks(energies: &[EnergyVector]) -> Vec<Vec<usize>> {
    let mut index: HashMap<&EnergyVector, usize> = HashMap::new();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for (i, e) in energies.iter().enumerate() {
        let b = *index.entry(e).or_insert_with(|| {
            blocks.push(Vec::new());
            blocks.len() - 1
        });
        blocks[b].push(i);
    }
    blocks
}

/// Haar-random unitary inside each eigenspace of the given (exact) energies.
pub fn random_energy_conserving_unitary<R: Rng + ?Sized>(
    energies: &[EnergyVector],
    rng: &mut R,
) -> CMatrix {
    let n = energies.len();
    let mut v = CMatrix::zeros(n, n);
    for block in energy_blocks(energies) {
        let u = linalg::haar_unitary(block.len(), rng);
        for (a, &i) in block.iter().enumerate() {
            for (b, &j) in block.iter().enumerate() {
                v[(i, j)] = u[(a, b)];
            }
        }
    }
    v
}

/// `‖V H_in − H_out V‖_max` for diagonal Hamiltonians given by their
/// numeric energies.
pub fn check_energy_conserving(v: &CMatrix, e_in: &[f64], e_out: &[f64]) -> Result<f64> {
    if v.ncols() != e_in.len() || v.nrows() != e_out.len() {
        return Err(Error::Argument(format!(
            "operator is {}x{}, energies give {}x{}",
            v.nrows(),
            v.ncols(),
            e_out.len(),
            e_in.len()
        )));
    }
    let mut r: f64 = 0.0;
    for j in 0..v.ncols() {
        for i in 0..v.nrows() {
            r = r.max(v[(i, j)].norm() * (e_in[j] - e_out[i]).abs());
        }
    }
    Ok(r)
}

/// The pinching channel `ρ ↦ Σ_E Π_E ρ Π_E`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pinching;

impl Channel for Pinching {
    fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        Ok(pinching(rho))
    }
}

/// Removes every matrix element between different exact energies.
pub fn pinching(rho: &DensityOperator) -> DensityOperator {
    let energies = rho.energies();
    let mut block_of = vec![0usize; energies.len()];
    for (b, block) in energy_blocks(&energies).iter().enumerate() {
        for &i in block {
            block_of[i] = b;
        }
    }
    let m = CMatrix::from_fn(rho.dim(), rho.dim(), |i, j| {
        if block_of[i] == block_of[j] {
            rho.matrix()[(i, j)]
        } else {
            linalg::ZERO
        }
    });
    DensityOperator::from_trusted(m, rho.basis().clone(), rho.subsystems().to_vec())
}

/// Trace distance between `Λ(τ)` and `τ`.
pub fn check_gibbs_preserving(
    channel: &dyn Channel,
    basis: &Arc<FrequencyBasis>,
    system: &[Subsystem],
    beta: f64,
) -> Result<f64> {
    let tau = gibbs_state_of(basis.clone(), system.to_vec(), beta)?;
    let out = channel.apply(&tau)?;
    if out.dim() != tau.dim() {
        return Err(Error::Argument("channel changes the dimension".into()));
    }
    Ok(trace_distance(&out, &tau))
}

/// `e^{−iHt} ρ e^{iHt}` for the state's own diagonal Hamiltonian.
pub fn evolve(rho: &DensityOperator, t: f64) -> DensityOperator {
    let e = rho.numeric_energies();
    let m = CMatrix::from_fn(rho.dim(), rho.dim(), |i, j| {
        rho.matrix()[(i, j)] * Complex64::from_polar(1.0, -(e[i] - e[j]) * t)
    });
    DensityOperator::from_trusted(m, rho.basis().clone(), rho.subsystems().to_vec())
}

/// Default covariance sample times: `n` pseudo-random points in
/// `[0, 2π/g]`, `g` the smallest positive energy gap.
pub fn default_time_samples(energies: &[f64], n: usize) -> Vec<f64> {
    let mut gap = f64::INFINITY;
    for a in energies {
        for b in energies {
            let d = (a - b).abs();
            if d > 1e-12 && d < gap {
                gap = d;
            }
        }
    }
    let period = if gap.is_finite() { 2.0 * PI / gap } else { 2.0 * PI };
    let mut rng = ChaCha8Rng::seed_from_u64(0x7157_0016);
    (0..n).map(|_| rng.random::<f64>() * period).collect()
}

/// Number of sample times used by [`check_covariant`] callers by default.
pub const DEFAULT_TIME_SAMPLES: usize = 16;

/// Probe states: energy eigenstates, pairwise real and imaginary
/// superpositions (all pairs up to dimension 16, neighbours beyond) and one
/// fixed random mixed state.
pub fn probe_states(basis: &Arc<FrequencyBasis>, system: &[Subsystem]) -> Result<Vec<DensityOperator>> {
    let d: usize = system.iter().map(Subsystem::dim).product();
    let mut out = Vec::new();
    for i in 0..d {
        out.push(DensityOperator::basis_state(i, basis.clone(), system.to_vec())?);
    }
    let pairs: Vec<(usize, usize)> = if d <= 16 {
        (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect()
    } else {
        (0..d - 1).map(|i| (i, i + 1)).collect()
    };
    for (i, j) in pairs {
        for phase in [linalg::ONE, Complex64::new(0.0, 1.0)] {
            let mut psi = CVector::zeros(d);
            psi[i] = Complex64::new(FRAC_1_SQRT_2, 0.0);
            psi[j] = phase * FRAC_1_SQRT_2;
            out.push(DensityOperator::from_pure(&psi, basis.clone(), system.to_vec())?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0b);
    out.push(DensityOperator::from_trusted(
        linalg::random_density_matrix(d, &mut rng),
        basis.clone(),
        system.to_vec(),
    ));
    Ok(out)
}

/// Largest trace distance between `Λ(e^{−iHt}ρe^{iHt})` and
/// `e^{−iH′t}Λ(ρ)e^{iH′t}` over the probe states and sample times.
pub fn check_covariant(
    channel: &dyn Channel,
    basis: &Arc<FrequencyBasis>,
    system: &[Subsystem],
    t_samples: &[f64],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for probe in probe_states(basis, system)? {
        let out = channel.apply(&probe)?;
        for &t in t_samples {
            let a = channel.apply(&evolve(&probe, t))?;
            let b = evolve(&out, t);
            worst = worst.max(matrix_trace_distance(a.matrix(), b.matrix()));
        }
    }
    Ok(worst)
}
