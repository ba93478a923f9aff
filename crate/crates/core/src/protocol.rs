//! The marginal conversion pipeline and the correlated catalyst built on it.
//!
//! `run_marginal_conversion` takes `ρ^{⊗μν}` to a state `Ξ` whose single-copy
//! marginals approximate `ρ′`:
//!
//! 1. pinch each block of `μ` copies;
//! 2. convert the pinched populations to the classical stand-in of
//!    `ρ′^{⊗μ}` with a Gibbs-stochastic map;
//! 3. prepare one ladder resource per element of an integer basis of the
//!    coherent modes of `ρ`;
//! 4. rotate the `ν` blocks one after another with the shift-compensated
//!    unitary, reusing the same resource.
//!
//! The catalyst `c = (1/n) Σ_k ρ^{⊗k−1} ⊗ Ξ′_{n−k} ⊗ |k⟩⟨k|` is kept factored
//! by register label; `Ξ′_m` is the marginal of `Ξ′` on its last `m` slots.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catcoherence::{default_truncation, ladder_label, ResourceState, ShiftCompensatedUnitary};
use crate::channels::pinching;
use crate::classical::{
    apply_classical_map, build_classical_target, gibbs_stochastic_feasible, stochastic_residual, thermo_violation,
    ClassicalState, WindowPolicy, DEFAULT_SEARCH_RADIUS,
};
use crate::error::{Error, Result};
use crate::modes::{coherent_modes, in_resonant_span, independent_basis, IntegerBasis, DEFAULT_MAG_THRESHOLD};
use crate::qstate::density::{matrix_trace_distance, partial_trace_matrix};
use crate::qstate::linalg::{self, CMatrix, CVector};
use crate::qstate::{
    entropy, free_energy, gibbs_state_of, max_dim, tensor_power, trace_distance, DensityOperator, FrequencyBasis,
    Subsystem, Tolerances,
};
use crate::randomwalk::{hitting_bound, walk_from_unitary, WalkSpec};

/// Version of the report layout.
pub const SCHEMA_VERSION: u32 = 1;
/// States closer than this are treated as equal and converted by the identity.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Slack allowed when checking that free energy does not increase.
pub const LEDGER_TOL: f64 = 1e-8;
/// Largest accepted catalyst residual.
pub const CATALYST_TOL: f64 = 1e-12;
/// Default fraction of Gibbs padding copies.
pub const DEFAULT_DELTA: f64 = 0.125;
/// Mutual information is computed when a branch has at most this dimension.
pub const MUTUAL_INFO_MAX_DIM: usize = 1024;
/// Rough bound on the work of the joint simulation (complex multiply-adds).
const WORK_LIMIT: f64 = 4e10;

fn one() -> usize {
    1
}

fn default_radius() -> u32 {
    DEFAULT_SEARCH_RADIUS
}

fn default_threshold() -> f64 {
    DEFAULT_MAG_THRESHOLD
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

/// Inputs of a conversion run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub rho: DensityOperator,
    pub rho_prime: DensityOperator,
    pub beta: f64,
    #[serde(default = "one")]
    pub mu: usize,
    #[serde(default = "one")]
    pub nu: usize,
    #[serde(rename = "L")]
    pub width: usize,
    #[serde(rename = "M")]
    pub offset: usize,
    #[serde(default)]
    pub policy: WindowPolicy,
    #[serde(default = "default_radius")]
    pub radius: u32,
    #[serde(default = "default_threshold")]
    pub mag_threshold: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    /// Target fraction of Gibbs padding copies in the catalyst.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Explicit number of padding copies; overrides `delta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl ProtocolConfig {
    pub fn new(rho: DensityOperator, rho_prime: DensityOperator, beta: f64, width: usize, offset: usize) -> Self {
        ProtocolConfig {
            rho,
            rho_prime,
            beta,
            mu: 1,
            nu: 1,
            width,
            offset,
            policy: WindowPolicy::default(),
            radius: DEFAULT_SEARCH_RADIUS,
            mag_threshold: DEFAULT_MAG_THRESHOLD,
            tolerances: Tolerances::default(),
            seed: 0,
            delta: DEFAULT_DELTA,
            padding: None,
        }
    }

    /// Number of Gibbs copies appended to `Ξ` in the catalyst.
    pub fn padding_copies(&self) -> usize {
        self.padding.unwrap_or_else(|| {
            let m = (self.mu * self.nu) as f64;
            (self.delta * m / (1.0 - self.delta)).round().max(0.0) as usize
        })
    }

    fn validate(&self) -> Result<()> {
        if self.mu == 0 || self.nu == 0 {
            return Err(Error::Argument("mu and nu must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Argument("L must be at least 1".into()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Argument(format!("beta must be finite and positive, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Argument("delta must lie in [0, 1)".into()));
        }
        if !self.rho.same_system(&self.rho_prime) || **self.rho.basis() != **self.rho_prime.basis() {
            return Err(Error::Argument("rho and rho_prime live on different systems".into()));
        }
        for s in [&self.rho, &self.rho_prime] {
            DensityOperator::with_tolerances(
                s.matrix().clone(),
                s.basis().clone(),
                s.subsystems().to_vec(),
                &self.tolerances,
            )?;
        }
        Ok(())
    }
}

/// What the pipeline did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionStatus {
    /// `ρ′ = ρ`; the identity map was used.
    Identity,
    /// `ρ′` has no coherence; no resource was needed.
    IncoherentTarget,
    /// Full pipeline with ladder resources.
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    /// Free energy per copy.
    pub free_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkReport {
    pub ladder: usize,
    pub mode: String,
    pub jumps: Vec<(i64, f64)>,
    pub drift: f64,
    /// `None` when the drift is not positive.
    pub gamma: Option<f64>,
    /// Hitting bound at `ξ = M`; 1 when it does not apply.
    pub bound: f64,
    /// `γ^M`; 1 when it does not apply.
    pub loose: f64,
}

/// Everything measured during one conversion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub schema_version: u32,
    pub seed: u64,
    pub status: ConversionStatus,
    pub mu: usize,
    pub nu: usize,
    #[serde(rename = "L")]
    pub width: usize,
    #[serde(rename = "M")]
    pub offset: usize,
    pub beta: f64,
    pub f_rho: f64,
    pub f_rho_prime: f64,
    /// Coherent modes of `ρ` reduced to an integer basis.
    pub ladders: Vec<String>,
    pub ledger: Vec<LedgerEntry>,
    pub ledger_monotone: bool,
    pub lp_residual: f64,
    /// Trace distance between the LP output and the designed classical target.
    pub classical_error: f64,
    pub window_violations: usize,
    pub truncation: Vec<usize>,
    pub walks: Vec<WalkReport>,
    /// `Σ_l bound_l`, capped at 1.
    pub predicted_failure: f64,
    /// `|𝒬|·max_l γ_l^M`, capped at 1.
    pub loose_failure: f64,
    /// Per block: distance of the block marginal from the rotated classical output.
    pub step_errors: Vec<f64>,
    /// Per block: distance of the block marginal from `ρ′^{⊗μ}`.
    pub block_errors: Vec<f64>,
    /// Per copy: distance of the single-copy marginal from `ρ′`.
    pub marginal_distances: Vec<f64>,
    pub max_marginal_distance: f64,
    pub boundary_mass: Vec<f64>,
    pub leakage_warning: bool,
    pub resource_energy_before: f64,
    pub resource_energy_after: f64,
}

/// Labels and Hamiltonians of `n` copies of the system of `rho`.
fn slot_subsystems(rho: &DensityOperator, n: usize) -> Vec<Subsystem> {
    let mut out = Vec::new();
    for k in 1..=n {
        for s in rho.subsystems() {
            out.push(Subsystem::new(format!("{}{k}", s.label), s.hamiltonian.clone()));
        }
    }
    out
}

/// Single-copy marginals of a state on `n` identical slots of dimension `d`.
fn slot_marginals(m: &CMatrix, d: usize, n: usize) -> Vec<CMatrix> {
    let dims = vec![d; n];
    (0..n)
        .map(|i| {
            let kept: Vec<bool> = (0..n).map(|j| j == i).collect();
            partial_trace_matrix(m, &dims, &kept)
        })
        .collect()
}

fn classical_to_matrix(q: &ClassicalState) -> CMatrix {
    linalg::diag_real(q.probs())
}

fn monotone(ledger: &[LedgerEntry]) -> bool {
    ledger
        .windows(2)
        .all(|w| w[1].free_energy <= w[0].free_energy + LEDGER_TOL)
}

/// Runs Steps (1)–(4) on `ρ^{⊗μν}` and returns `Ξ` with its report.
///
/// A classical step with no Gibbs-stochastic solution fails with
/// [`Error::Infeasible`] naming the first violated curve point. If
/// `F(ρ) ≤ F(ρ′)` and the classical step nevertheless succeeds the run is
/// refused with [`Error::FreeEnergyOrder`].
pub fn run_marginal_conversion(cfg: &ProtocolConfig) -> Result<(DensityOperator, ConversionReport)> {
    cfg.validate()?;
    let rho = &cfg.rho;
    let rho_p = &cfg.rho_prime;
    let basis = rho.basis().clone();
    let n = cfg.mu * cfg.nu;
    let d1 = rho.dim();
    let f_rho = free_energy(rho, cfg.beta);
    let f_rho_prime = free_energy(rho_p, cfg.beta);
    let slots = slot_subsystems(rho, n);
    let total = (d1 as f64).powi(n as i32);
    if total > max_dim() as f64 {
        return Err(Error::ResourceLimit(format!(
            "{n} copies of a {d1}-level system exceed the dimension cap {}",
            max_dim()
        )));
    }

    let mut report = ConversionReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        status: ConversionStatus::Identity,
        mu: cfg.mu,
        nu: cfg.nu,
        width: cfg.width,
        offset: cfg.offset,
        beta: cfg.beta,
        f_rho,
        f_rho_prime,
        ladders: vec![],
        ledger: vec![LedgerEntry { stage: "input".into(), free_energy: f_rho }],
        ledger_monotone: true,
        lp_residual: 0.0,
        classical_error: 0.0,
        window_violations: 0,
        truncation: vec![],
        walks: vec![],
        predicted_failure: 0.0,
        loose_failure: 0.0,
        step_errors: vec![],
        block_errors: vec![],
        marginal_distances: vec![],
        max_marginal_distance: 0.0,
        boundary_mass: vec![],
        leakage_warning: false,
        resource_energy_before: 0.0,
        resource_energy_after: 0.0,
    };

    if trace_distance(rho, rho_p) <= IDENTITY_TOL {
        let xi = tensor_power(rho, n)?;
        let xi = DensityOperator::from_trusted(xi.matrix().clone(), basis, slots);
        finish_marginals(&mut report, &xi, rho_p, cfg.mu, cfg.beta);
        return Ok((xi, report));
    }

    // Step (0): the mode condition.
    let q_basis = independent_basis(&coherent_modes(rho, cfg.mag_threshold).to_vec(), &basis);
    let target_modes = coherent_modes(rho_p, cfg.mag_threshold);
    if target_modes.iter().any(|m| in_resonant_span(m, &q_basis).is_none()) {
        return Err(Error::ModeCondition);
    }
    report.ladders = q_basis.elements().iter().map(ToString::to_string).collect();

    // Step (1): pinching.
    let block = tensor_power(rho, cfg.mu)?;
    let pinched = pinching(&block);
    let p = ClassicalState::from_state(&pinched)?;
    report.ledger.push(LedgerEntry {
        stage: "pinched".into(),
        free_energy: free_energy(&pinched, cfg.beta) / cfg.mu as f64,
    });

    // Step (2): classical conversion.
    let (plan, q) = build_classical_target(rho_p, cfg.mu, &q_basis, cfg.policy, cfg.radius)?;
    report.window_violations = plan.violations.len();
    let Some(t) = gibbs_stochastic_feasible(&p, &q, cfg.beta)? else {
        let detail = match thermo_violation(&p, &q, cfg.beta)? {
            Some(v) => format!(
                "target curve exceeds input curve at Gibbs weight {:.9}: {:.9} > {:.9}",
                v.x, v.curve_q, v.curve_p
            ),
            None => "linear program reports no Gibbs-stochastic map".into(),
        };
        return Err(Error::Infeasible(detail));
    };
    if f_rho <= f_rho_prime {
        return Err(Error::FreeEnergyOrder { f_rho, f_target: f_rho_prime });
    }
    let g = p.gibbs_weights(cfg.beta)?;
    report.lp_residual = stochastic_residual(&t, &g, p.probs(), q.probs());
    let q_hat = apply_classical_map(&t, &p)?;
    report.classical_error = matrix_trace_distance(&classical_to_matrix(&q_hat), &classical_to_matrix(&q));
    let block_sys = block.subsystems().to_vec();
    let classical_out = q_hat.to_state(block_sys.clone())?;
    report.ledger.push(LedgerEntry {
        stage: "classical".into(),
        free_energy: free_energy(&classical_out, cfg.beta) / cfg.mu as f64,
    });

    // Steps (3) and (4).
    let xi_m = if plan.incoherent_target {
        report.status = ConversionStatus::IncoherentTarget;
        let u = ShiftCompensatedUnitary::new(&plan.rotation(), basis.clone(), block_sys, IntegerBasis::empty(), vec![])?;
        let out = u.v() * classical_to_matrix(&q_hat) * u.v().adjoint();
        let mut xi = out.clone();
        for _ in 1..cfg.nu {
            xi = linalg::kron(&xi, &out);
        }
        report.step_errors = vec![0.0; cfg.nu];
        report.boundary_mass = vec![0.0; cfg.nu];
        xi
    } else {
        report.status = ConversionStatus::Rotated;
        let l_max = plan.max_shift().max(1) as usize;
        let trunc = default_truncation(cfg.width, cfg.offset, cfg.nu, l_max);
        let specs: Vec<ResourceState> = q_basis
            .elements()
            .iter()
            .map(|mode| ResourceState::new(cfg.width, cfg.offset, mode.clone(), trunc))
            .collect::<Result<_>>()?;
        report.truncation = vec![trunc; specs.len()];
        let u = ShiftCompensatedUnitary::from_plan(&plan, specs.iter().map(ResourceState::dim).collect())?;
        walk_statistics(&mut report, &u, &q_hat, cfg.offset)?;
        rotate_blocks(&mut report, &u, &q_hat, &specs, &basis, cfg.nu)?
    };

    let xi = DensityOperator::from_trusted(xi_m, basis, slots);
    finish_marginals(&mut report, &xi, rho_p, cfg.mu, cfg.beta);
    Ok((xi, report))
}

fn walk_statistics(
    report: &mut ConversionReport,
    u: &ShiftCompensatedUnitary,
    q_hat: &ClassicalState,
    offset: usize,
) -> Result<()> {
    let mut sum = 0.0;
    let mut worst_loose: f64 = 0.0;
    for l in 0..u.ladders().len() {
        let spec = walk_from_unitary(u, q_hat, l, offset.max(1) as u64)?;
        let drift = spec.drift();
        let (gamma, bound, loose) = match hitting_bound(&spec) {
            Ok(b) if offset > 0 => (Some(b.gamma), b.bound, b.loose),
            Ok(b) => (Some(b.gamma), 1.0, 1.0),
            Err(Error::NoRoot { .. }) => (None, 1.0, 1.0),
            Err(e) => return Err(e),
        };
        sum += bound;
        worst_loose = worst_loose.max(loose);
        report.walks.push(WalkReport {
            ladder: l,
            mode: u.ladders().elements()[l].to_string(),
            jumps: WalkSpec::jumps(&spec).to_vec(),
            drift,
            gamma,
            bound,
            loose,
        });
    }
    report.predicted_failure = sum.min(1.0);
    report.loose_failure = (u.ladders().len() as f64 * worst_loose).min(1.0);
    Ok(())
}

/// Simulates the `ν` rotations on `q̂^{⊗ν} ⊗ η` exactly. The input is a
/// mixture of classical strings and every string evolves as a pure vector.
fn rotate_blocks(
    report: &mut ConversionReport,
    u: &ShiftCompensatedUnitary,
    q_hat: &ClassicalState,
    specs: &[ResourceState],
    basis: &Arc<FrequencyBasis>,
    nu: usize,
) -> Result<CMatrix> {
    let db = u.system_dim();
    let qd = u.dim() / db;
    let blocks_dim = db.pow(nu as u32);
    let big = blocks_dim
        .checked_mul(qd)
        .filter(|&x| x <= max_dim())
        .ok_or_else(|| {
            Error::ResourceLimit(format!(
                "{nu} blocks of dimension {db} with ladders of total dimension {qd} exceed the cap {}",
                max_dim()
            ))
        })?;
    let work = (blocks_dim as f64).powi(3) * qd as f64;
    if work > WORK_LIMIT {
        return Err(Error::ResourceLimit(format!("joint simulation needs about {work:.1e} operations")));
    }

    let mut eta = CVector::from_element(1, linalg::ONE);
    let mut res_state: Option<DensityOperator> = None;
    for (l, s) in specs.iter().enumerate() {
        let r = s.state(basis, &ladder_label(l))?;
        let (vals, vecs) = linalg::eigh(r.matrix());
        let top = vals.len() - 1;
        eta = eta.kronecker(&vecs.column(top).into_owned());
        res_state = Some(match res_state {
            None => r,
            Some(acc) => crate::qstate::tensor(&acc, &r)?,
        });
    }
    let res_state = res_state.expect("at least one ladder");
    report.resource_energy_before = res_state.mean_energy();
    let ladder_energy: Vec<f64> = res_state.numeric_energies();

    let probs = q_hat.probs();
    let mut xi = CMatrix::zeros(blocks_dim, blocks_dim);
    let mut res = CMatrix::zeros(qd, qd);
    let mut boundary = vec![0.0; nu];
    for s in 0..blocks_dim {
        let mut p_s = 1.0;
        let mut rem = s;
        for _ in 0..nu {
            p_s *= probs[rem % db];
            rem /= db;
        }
        if p_s == 0.0 {
            continue;
        }
        let mut psi = CVector::zeros(big);
        for k in 0..qd {
            psi[s * qd + k] = eta[k];
        }
        for (b, mass) in boundary.iter_mut().enumerate() {
            let outer = db.pow(b as u32);
            let inner = db.pow((nu - 1 - b) as u32);
            *mass += p_s * u.apply_embedded(&mut psi, outer, inner);
        }
        let a = CMatrix::from_fn(blocks_dim, qd, |r, k| psi[r * qd + k]);
        xi += (&a * a.adjoint()).scale(p_s);
        res += (a.transpose() * a.map(|z| z.conj())).scale(p_s);
    }
    report.resource_energy_after = (0..qd).map(|k| res[(k, k)].re * ladder_energy[k]).sum();
    report.leakage_warning = boundary.iter().any(|&m| m > crate::catcoherence::LEAKAGE_WARNING);
    report.boundary_mass = boundary;

    let target = u.v() * classical_to_matrix(q_hat) * u.v().adjoint();
    report.step_errors = slot_marginals(&xi, db, nu)
        .iter()
        .map(|m| matrix_trace_distance(m, &target))
        .collect();
    Ok(xi)
}

fn finish_marginals(report: &mut ConversionReport, xi: &DensityOperator, rho_p: &DensityOperator, mu: usize, beta: f64) {
    let d1 = rho_p.dim();
    let n = xi.subsystems().len() / rho_p.subsystems().len();
    let nu = n / mu;
    let marginals = slot_marginals(xi.matrix(), d1, n);
    report.marginal_distances = marginals.iter().map(|m| matrix_trace_distance(m, rho_p.matrix())).collect();
    report.max_marginal_distance = report.marginal_distances.iter().copied().fold(0.0, f64::max);
    let block_target = tensor_power(rho_p, mu).map(|t| t.matrix().clone());
    if let Ok(bt) = block_target {
        report.block_errors = slot_marginals(xi.matrix(), d1.pow(mu as u32), nu)
            .iter()
            .map(|m| matrix_trace_distance(m, &bt))
            .collect();
    }
    if report.step_errors.is_empty() {
        report.step_errors = vec![0.0; nu];
    }
    let mean_f: f64 = marginals
        .iter()
        .map(|m| {
            let s = DensityOperator::from_trusted(m.clone(), rho_p.basis().clone(), rho_p.subsystems().to_vec());
            free_energy(&s, beta)
        })
        .sum::<f64>()
        / n as f64;
    report.ledger.push(LedgerEntry { stage: "output marginals".into(), free_energy: mean_f });
    report.ledger_monotone = monotone(&report.ledger);
}

/// The catalyst `c`, stored as `ρ` and the tail marginals `Ξ′_m`.
#[derive(Debug, Clone)]
pub struct CatalystState {
    n: usize,
    padding: usize,
    rho: DensityOperator,
    xi_prime: DensityOperator,
    /// `tails[m]` is the marginal of `Ξ′` on its last `m` slots.
    tails: Vec<CMatrix>,
}

impl CatalystState {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Fraction of Gibbs copies, `pad/n`.
    pub fn delta(&self) -> f64 {
        self.padding as f64 / self.n as f64
    }

    pub fn xi_prime(&self) -> &DensityOperator {
        &self.xi_prime
    }

    /// `Ξ′_m`.
    pub fn tail(&self, m: usize) -> &CMatrix {
        &self.tails[m]
    }

    /// Register populations: uniform by construction.
    pub fn register_marginal(&self) -> Vec<f64> {
        vec![1.0 / self.n as f64; self.n]
    }

    /// Number of stored complex entries.
    pub fn factored_size(&self) -> usize {
        self.tails.iter().map(|t| t.len()).sum::<usize>() + self.rho.matrix().len()
    }

    /// `ρ^{⊗k−1} ⊗ Ξ′_{n−k}` for `k = 1..=n`, on `n − 1` slots.
    pub fn component(&self, k: usize) -> CMatrix {
        assert!((1..=self.n).contains(&k), "register label out of range");
        let mut m = CMatrix::from_element(1, 1, linalg::ONE);
        for _ in 1..k {
            m = linalg::kron(&m, self.rho.matrix());
        }
        linalg::kron(&m, &self.tails[self.n - k])
    }

    /// The whole catalyst as one matrix, register last. Only for `n ≤ 3`.
    pub fn materialize(&self) -> Result<CMatrix> {
        if self.n > 3 {
            return Err(Error::ResourceLimit("materializing the catalyst is limited to n <= 3".into()));
        }
        let blocks: Vec<CMatrix> = (1..=self.n).map(|k| self.component(k)).collect();
        let cd = blocks[0].nrows();
        let mut c = CMatrix::zeros(cd * self.n, cd * self.n);
        for (k, b) in blocks.iter().enumerate() {
            for i in 0..cd {
                for j in 0..cd {
                    c[(i * self.n + k, j * self.n + k)] = b[(i, j)] / self.n as f64;
                }
            }
        }
        Ok(c)
    }
}

/// Builds `c` from the conversion output `Ξ` padded with Gibbs copies:
/// `Ξ′ = Ξ ⊗ τ^{⊗pad}`.
pub fn build_catalyst(cfg: &ProtocolConfig, xi: &DensityOperator) -> Result<CatalystState> {
    let d1 = cfg.rho.dim();
    let m = cfg.mu * cfg.nu;
    if xi.dim() != d1.pow(m as u32) {
        return Err(Error::Argument("Xi does not have mu*nu copies of the system".into()));
    }
    let padding = cfg.padding_copies();
    let n = m + padding;
    let dim = (d1 as f64).powi(n as i32);
    if dim > max_dim() as f64 {
        let factored: f64 = (0..n).map(|k| (d1 as f64).powi(2 * k as i32)).sum();
        return Err(Error::ResourceLimit(format!(
            "n = {n} copies need a {dim:.0}-dimensional Xi'; factored catalyst holds {factored:.0} entries"
        )));
    }
    let mut xi_m = xi.matrix().clone();
    if padding > 0 {
        let tau = gibbs_state_of(cfg.rho.basis().clone(), cfg.rho.subsystems().to_vec(), cfg.beta)?;
        for _ in 0..padding {
            xi_m = linalg::kron(&xi_m, tau.matrix());
        }
    }
    let dims = vec![d1; n];
    let tails: Vec<CMatrix> = (0..n)
        .map(|t| {
            if t == 0 {
                return CMatrix::from_element(1, 1, linalg::ONE);
            }
            let kept: Vec<bool> = (0..n).map(|j| j >= n - t).collect();
            partial_trace_matrix(&xi_m, &dims, &kept)
        })
        .collect();
    let xi_prime = DensityOperator::from_trusted(xi_m, cfg.rho.basis().clone(), slot_subsystems(&cfg.rho, n));
    Ok(CatalystState { n, padding, rho: cfg.rho.clone(), xi_prime, tails })
}

/// Measurements of one catalytic step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalystReport {
    pub schema_version: u32,
    pub n: usize,
    pub padding: usize,
    pub delta: f64,
    /// `max_k ‖Tr_S π_k − c_k‖_max` over register labels.
    pub catalyst_residual: f64,
    pub system_error: f64,
    /// Mean single-copy distance of `Ξ` from `ρ′`.
    pub mean_marginal_error: f64,
    pub gibbs_error: f64,
    /// `‖σ_S − ((1−δ)·mean Ξ_i + δτ)‖_max`.
    pub mixture_residual: f64,
    /// `(1−δ)ε̄ + δ·‖τ − ρ′‖`.
    pub error_bound: f64,
    /// `ε̄ + 2δ`.
    pub loose_bound: f64,
    /// `I(S:C)` in nats, when the branches are small enough.
    pub mutual_information: Option<f64>,
    pub factored_size: usize,
}

/// Applies `Λ′` on the label-`n` branch, relabels `R` cyclically, and checks
/// that the catalyst came back exactly.
pub fn run_catalytic_step(
    cfg: &ProtocolConfig,
    catalyst: &CatalystState,
) -> Result<(DensityOperator, CatalystState, CatalystReport)> {
    let n = catalyst.n;
    let d1 = cfg.rho.dim();
    let dims = vec![d1; n];
    let full = d1.pow(n as u32);
    let mut system = CMatrix::zeros(d1, d1);
    let mut residual: f64 = 0.0;
    let mut mi_terms = 0.0;
    let compute_mi = full <= MUTUAL_INFO_MAX_DIM;
    for k in 1..=n {
        // Branch k after relabelling: ρ^{⊗k−1} ⊗ Ξ′_{n−k+1}, system at slot k−1.
        let branch = if k == 1 {
            catalyst.xi_prime.matrix().clone()
        } else {
            let mut m = CMatrix::from_element(1, 1, linalg::ONE);
            for _ in 1..k {
                m = linalg::kron(&m, cfg.rho.matrix());
            }
            linalg::kron(&m, &catalyst.tails[n - k + 1])
        };
        let sys_kept: Vec<bool> = (0..n).map(|j| j == k - 1).collect();
        system += partial_trace_matrix(&branch, &dims, &sys_kept).unscale(n as f64);
        let cat_out = if n == 1 {
            CMatrix::from_element(1, 1, branch.trace())
        } else {
            let cat_kept: Vec<bool> = sys_kept.iter().map(|x| !x).collect();
            partial_trace_matrix(&branch, &dims, &cat_kept)
        };
        let cat_in = catalyst.component(k);
        residual = residual.max(linalg::max_abs(&(cat_out - &cat_in)));
        if compute_mi {
            mi_terms += entropy_of(&cat_in) - entropy_of(&branch);
        }
    }
    if residual > CATALYST_TOL {
        return Err(Error::CatalystResidual { residual, tolerance: CATALYST_TOL });
    }
    let sys_out = DensityOperator::from_trusted(system, cfg.rho.basis().clone(), cfg.rho.subsystems().to_vec());

    let m = cfg.mu * cfg.nu;
    let xi_marg = slot_marginals(catalyst.xi_prime.matrix(), d1, n);
    let rho_p = cfg.rho_prime.matrix();
    let mean_err = xi_marg[..m].iter().map(|x| matrix_trace_distance(x, rho_p)).sum::<f64>() / m as f64;
    let mean_xi = xi_marg[..m].iter().fold(CMatrix::zeros(d1, d1), |acc, x| acc + x).unscale(m as f64);
    let tau = gibbs_state_of(cfg.rho.basis().clone(), cfg.rho.subsystems().to_vec(), cfg.beta)?;
    let delta = catalyst.delta();
    let mixture = mean_xi.scale(1.0 - delta) + tau.matrix().scale(delta);
    let gibbs_error = matrix_trace_distance(tau.matrix(), rho_p);
    let report = CatalystReport {
        schema_version: SCHEMA_VERSION,
        n,
        padding: catalyst.padding,
        delta,
        catalyst_residual: residual,
        system_error: trace_distance(&sys_out, &cfg.rho_prime),
        mean_marginal_error: mean_err,
        gibbs_error,
        mixture_residual: linalg::max_abs(&(sys_out.matrix() - mixture)),
        error_bound: (1.0 - delta) * mean_err + delta * gibbs_error,
        loose_bound: mean_err + 2.0 * delta,
        mutual_information: compute_mi.then(|| (entropy(&sys_out) + mi_terms / n as f64).max(0.0)),
        factored_size: catalyst.factored_size(),
    };
    Ok((sys_out, catalyst.clone(), report))
}

fn entropy_of(m: &CMatrix) -> f64 {
    linalg::eigvalsh(m)
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| -l * l.ln())
        .sum()
}

/// Conversion, catalyst construction and one catalytic step.
pub fn run_catalytic(cfg: &ProtocolConfig) -> Result<(ConversionReport, CatalystReport)> {
    let (xi, conv) = run_marginal_conversion(cfg)?;
    let c = build_catalyst(cfg, &xi)?;
    let (_, _, rep) = run_catalytic_step(cfg, &c)?;
    Ok((conv, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{EnergyVector, HamiltonianSpec};
    use num_complex::Complex64;

    fn qubit(m: CMatrix) -> DensityOperator {
        let b = Arc::new(FrequencyBasis::single("w", 1.0).unwrap());
        let h = HamiltonianSpec::from_energies(b, vec![EnergyVector::zero(1), EnergyVector::from_ints(&[1])]).unwrap();
        DensityOperator::single(m, "S", h).unwrap()
    }

    fn pure(a: f64) -> DensityOperator {
        // √(1−a)|0⟩ + √a|1⟩
        let v = [(1.0 - a).sqrt(), a.sqrt()];
        qubit(CMatrix::from_fn(2, 2, |i, j| Complex64::new(v[i] * v[j], 0.0)))
    }

    fn mixed_target() -> DensityOperator {
        let s = 0.3f64.sqrt();
        let c = 0.7f64.sqrt();
        let psi0 = [s, c];
        let psi1 = [c, -s];
        qubit(CMatrix::from_fn(2, 2, |i, j| {
            Complex64::new(0.8 * psi0[i] * psi0[j] + 0.2 * psi1[i] * psi1[j], 0.0)
        }))
    }

    fn end_to_end_cfg() -> ProtocolConfig {
        let mut cfg = ProtocolConfig::new(pure(0.9), mixed_target(), 1.0, 128, 16);
        cfg.nu = 4;
        cfg.policy = WindowPolicy::Relaxed;
        cfg
    }

    #[test]
    fn self_conversion_is_identity() {
        let mut cfg = ProtocolConfig::new(pure(0.5), pure(0.5), 1.0, 128, 16);
        cfg.nu = 4;
        let (xi, rep) = run_marginal_conversion(&cfg).unwrap();
        assert_eq!(rep.status, ConversionStatus::Identity);
        assert_eq!(xi.dim(), 16);
        assert!(rep.max_marginal_distance <= 0.02);
        assert!(rep.ledger_monotone);
    }

    #[test]
    fn incoherent_target_short_circuits() {
        let target = qubit(linalg::diag_real(&[0.7, 0.3]));
        let mut cfg = ProtocolConfig::new(pure(0.9), target, 1.0, 8, 4);
        cfg.nu = 2;
        let (_, rep) = run_marginal_conversion(&cfg).unwrap();
        assert_eq!(rep.status, ConversionStatus::IncoherentTarget);
        assert!(rep.max_marginal_distance <= 1e-8, "{}", rep.max_marginal_distance);
        assert!(rep.ledger_monotone);
        assert!(rep.walks.is_empty());
    }

    #[test]
    fn end_to_end_rotation() {
        let cfg = end_to_end_cfg();
        let (xi, rep) = run_marginal_conversion(&cfg).unwrap();
        assert_eq!(rep.status, ConversionStatus::Rotated);
        assert_eq!(xi.dim(), 16);
        assert!(rep.max_marginal_distance <= 0.1, "{:?}", rep.marginal_distances);
        assert!(rep.ledger_monotone, "{:?}", rep.ledger);
        assert!(!rep.leakage_warning);
        let w = &rep.walks[0];
        let jumps: Vec<(i64, f64)> = w.jumps.clone();
        assert_eq!(jumps.len(), 3);
        assert!((jumps[0].1 - 0.06).abs() < 1e-8 && (jumps[2].1 - 0.24).abs() < 1e-8);
        assert!((w.gamma.unwrap() - 0.5).abs() < 1e-8);
        // per-ladder bounds add up to at most |Q|γ^M
        assert!(rep.predicted_failure <= rep.loose_failure);
        // resource energy gain equals ν times the drift
        let gain = rep.resource_energy_after - rep.resource_energy_before;
        assert!((gain - 4.0 * w.drift).abs() < 1e-6, "{gain}");
        let text = serde_json::to_string(&rep).unwrap();
        let back: ConversionReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn step_errors_match_reuse_sequence() {
        let mut cfg = end_to_end_cfg();
        cfg.width = 16;
        cfg.offset = 4;
        cfg.nu = 3;
        let (_, rep) = run_marginal_conversion(&cfg).unwrap();
        let q_basis = IntegerBasis::new(vec![EnergyVector::from_ints(&[1])]).unwrap();
        let (plan, q) = build_classical_target(&cfg.rho_prime, 1, &q_basis, WindowPolicy::Relaxed, 8).unwrap();
        let block = tensor_power(&cfg.rho, 1).unwrap();
        let p = ClassicalState::from_state(&pinching(&block)).unwrap();
        let t = gibbs_stochastic_feasible(&p, &q, 1.0).unwrap().unwrap();
        let q_hat = apply_classical_map(&t, &p).unwrap();
        let trunc = rep.truncation[0];
        let u = ShiftCompensatedUnitary::from_plan(&plan, vec![trunc + 1]).unwrap();
        let res = crate::catcoherence::make_resource(16, 4, &EnergyVector::from_ints(&[1]), trunc, cfg.rho.basis())
            .unwrap();
        let sys = q_hat.to_state(block.subsystems().to_vec()).unwrap();
        let seq = crate::catcoherence::reuse_sequence(&u, &vec![sys; 3], &res).unwrap();
        for (a, b) in seq.errors.iter().zip(&rep.step_errors) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn reversed_order_is_infeasible() {
        let mut cfg = ProtocolConfig::new(mixed_target(), pure(0.9), 1.0, 32, 8);
        cfg.policy = WindowPolicy::Relaxed;
        for mu in [1, 2] {
            cfg.mu = mu;
            assert!(matches!(run_marginal_conversion(&cfg), Err(Error::Infeasible(_))));
        }
    }

    #[test]
    fn mode_condition_is_enforced() {
        let cfg = ProtocolConfig::new(qubit(linalg::diag_real(&[0.0, 1.0])), pure(0.5), 1.0, 8, 4);
        assert!(matches!(run_marginal_conversion(&cfg), Err(Error::ModeCondition)));
    }

    #[test]
    fn catalyst_identity_and_smallest_instance() {
        let rho = mixed_target();
        let mut cfg = ProtocolConfig::new(rho.clone(), rho.clone(), 1.0, 8, 4);
        cfg.nu = 2;
        cfg.padding = Some(0);
        let (xi, _) = run_marginal_conversion(&cfg).unwrap();
        let c = build_catalyst(&cfg, &xi).unwrap();
        assert_eq!(c.n(), 2);
        assert_eq!(c.register_marginal(), vec![0.5, 0.5]);
        let full = c.materialize().unwrap();
        assert!((full.trace().re - 1.0).abs() < 1e-12);
        // label 1 carries Ξ′_1 = ρ, label 2 carries ρ
        assert!(linalg::max_abs(&(c.component(1) - rho.matrix())) < 1e-14);
        assert!(linalg::max_abs(&(c.component(2) - rho.matrix())) < 1e-14);
        let (sys, _, rep) = run_catalytic_step(&cfg, &c).unwrap();
        assert!(rep.catalyst_residual <= 1e-12);
        assert!(trace_distance(&sys, &rho) < 1e-12);
        assert!(rep.mutual_information.unwrap() < 1e-9);
    }

    #[test]
    fn catalyst_bookkeeping() {
        let target = qubit(linalg::diag_real(&[0.7, 0.3]));
        for (nu, pad) in [(2, 1), (3, 0)] {
            let mut cfg = ProtocolConfig::new(pure(0.9), target.clone(), 1.0, 8, 4);
            cfg.nu = nu;
            cfg.padding = Some(pad);
            let (xi, conv) = run_marginal_conversion(&cfg).unwrap();
            let c = build_catalyst(&cfg, &xi).unwrap();
            assert_eq!(c.n(), nu + pad);
            let (_, _, rep) = run_catalytic_step(&cfg, &c).unwrap();
            assert!(rep.catalyst_residual <= 1e-12);
            assert!(rep.mixture_residual <= 1e-9);
            assert!(rep.system_error <= rep.error_bound + 1e-9);
            assert!(rep.error_bound <= rep.loose_bound + 1e-12);
            if pad == 0 {
                assert!(rep.system_error <= conv.classical_error + 1e-9);
            }
        }
    }

    #[test]
    fn padding_follows_delta() {
        let mut cfg = ProtocolConfig::new(pure(0.9), mixed_target(), 1.0, 8, 4);
        cfg.nu = 7;
        assert_eq!(cfg.padding_copies(), 1);
        cfg.padding = Some(3);
        assert_eq!(cfg.padding_copies(), 3);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = end_to_end_cfg();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ProtocolConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.rho.matrix(), cfg.rho.matrix());
        assert_eq!(back.policy, WindowPolicy::Relaxed);
        assert!(serde_json::from_str::<ProtocolConfig>(&text.replacen("{", "{\"extra\":1,", 1)).is_err());
    }
}
