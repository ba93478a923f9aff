//! Energy-diagonal states: thermomajorization, Gibbs-stochastic maps and the
//! design of a classical target whose rotation needs only resonant modes.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use num_complex::Complex64;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::channels::energy_blocks;
use crate::error::{Error, Result};
use crate::modes::{coherent_modes, in_resonant_span, independent_basis, IntegerBasis};
use crate::qstate::density::{composite_energies, gibbs_weights};
use crate::qstate::io::HamiltonianJson;
use crate::qstate::linalg::{self, CMatrix, CVector};
use crate::qstate::{tensor_power, DensityOperator, EnergyVector, FrequencyBasis, Subsystem};

/// Probabilities below this are treated as zero in curve and entropy sums.
const PROB_EPS: f64 = 1e-15;
/// Slack used when comparing thermomajorization curves.
pub const CURVE_TOL: f64 = 1e-9;
/// Accepted equality residual of an LP solution.
pub const LP_RESIDUAL_TOL: f64 = 1e-8;
/// Most negative LP entry clipped to zero.
pub const LP_NEG_TOL: f64 = 1e-10;

/// A probability vector over exact energy levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassicalStateJson", into = "ClassicalStateJson")]
pub struct ClassicalState {
    probs: Vec<f64>,
    energies: Vec<EnergyVector>,
    basis: Arc<FrequencyBasis>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassicalStateJson {
    basis: FrequencyBasis,
    energies: Vec<EnergyVector>,
    probs: Vec<f64>,
}

impl TryFrom<ClassicalStateJson> for ClassicalState {
    type Error = Error;
    fn try_from(j: ClassicalStateJson) -> Result<Self> {
        ClassicalState::new(j.probs, j.energies, Arc::new(j.basis))
    }
}

impl From<ClassicalState> for ClassicalStateJson {
    fn from(c: ClassicalState) -> Self {
        ClassicalStateJson {
            basis: (*c.basis).clone(),
            energies: c.energies,
            probs: c.probs,
        }
    }
}

impl ClassicalState {
    pub fn new(probs: Vec<f64>, energies: Vec<EnergyVector>, basis: Arc<FrequencyBasis>) -> Result<Self> {
        if probs.len() != energies.len() || probs.is_empty() {
            return Err(Error::Argument(format!(
                "{} probabilities for {} energies",
                probs.len(),
                energies.len()
            )));
        }
        if energies.iter().any(|e| e.len() != basis.len()) {
            return Err(Error::Argument("energy has wrong number of coefficients".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidState("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidState(format!("probabilities sum to {total}")));
        }
        Ok(ClassicalState { probs, energies, basis })
    }

    /// Diagonal of a state (its pinched populations).
    pub fn from_state(rho: &DensityOperator) -> Result<Self> {
        let probs = rho.populations().iter().map(|p| p.max(0.0)).collect::<Vec<_>>();
        let total: f64 = probs.iter().sum();
        Self::new(
            probs.iter().map(|p| p / total).collect(),
            rho.energies(),
            rho.basis().clone(),
        )
    }

    /// Gibbs distribution over the given levels.
    pub fn gibbs(energies: Vec<EnergyVector>, basis: Arc<FrequencyBasis>, beta: f64) -> Result<Self> {
        let values: Vec<f64> = energies.iter().map(|e| e.value(&basis)).collect();
        let g = gibbs_weights(&values, beta)?;
        Self::new(g, energies, basis)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn energies(&self) -> &[EnergyVector] {
        &self.energies
    }

    pub fn basis(&self) -> &Arc<FrequencyBasis> {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn numeric_energies(&self) -> Vec<f64> {
        self.energies.iter().map(|e| e.value(&self.basis)).collect()
    }

    pub fn gibbs_weights(&self, beta: f64) -> Result<Vec<f64>> {
        gibbs_weights(&self.numeric_energies(), beta)
    }

    /// Diagonal density operator on the given system.
    pub fn to_state(&self, system: Vec<Subsystem>) -> Result<DensityOperator> {
        DensityOperator::diagonal(&self.probs, self.basis.clone(), system)
    }

    /// `D(p‖g)` in nats, `+∞` when `p` has weight where `g` has none.
    pub fn relative_entropy_to_gibbs(&self, beta: f64) -> Result<f64> {
        let g = self.gibbs_weights(beta)?;
        Ok(classical_relative_entropy(&self.probs, &g))
    }

    fn same_levels(&self, other: &ClassicalState) -> Result<()> {
        if self.energies != other.energies || *self.basis != *other.basis {
            return Err(Error::Argument("classical states live on different levels".into()));
        }
        Ok(())
    }
}

pub(crate) fn classical_relative_entropy(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a <= PROB_EPS {
            continue;
        }
        if b <= 0.0 {
            return f64::INFINITY;
        }
        d += a * (a / b).ln();
    }
    d.max(0.0)
}

/// Vertices of the thermomajorization curve of `p` relative to weights `g`:
/// cumulative `(Σg, Σp)` after sorting by decreasing `p_i/g_i`.
pub fn thermo_curve(p: &[f64], g: &[f64]) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| (p[b] / g[b]).total_cmp(&(p[a] / g[a])).then(a.cmp(&b)));
    let mut pts = Vec::with_capacity(p.len() + 1);
    let (mut x, mut y) = (0.0, 0.0);
    pts.push((x, y));
    for i in idx {
        x += g[i];
        y += p[i];
        pts.push((x, y));
    }
    pts
}

fn curve_at(pts: &[(f64, f64)], x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            if x1 - x0 <= 0.0 {
                return y1;
            }
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    pts.last().map_or(0.0, |p| p.1)
}

/// A point where the curve of `q` rises above the curve of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveViolation {
    /// Cumulative Gibbs weight at the breakpoint.
    pub x: f64,
    pub curve_p: f64,
    pub curve_q: f64,
}

/// First breakpoint of `q`'s curve lying above `p`'s curve, if any.
pub fn thermo_violation(p: &ClassicalState, q: &ClassicalState, beta: f64) -> Result<Option<CurveViolation>> {
    p.same_levels(q)?;
    let g = p.gibbs_weights(beta)?;
    let cp = thermo_curve(&p.probs, &g);
    let cq = thermo_curve(&q.probs, &g);
    for &(x, yq) in &cq {
        let yp = curve_at(&cp, x);
        if yp < yq - CURVE_TOL {
            return Ok(Some(CurveViolation { x, curve_p: yp, curve_q: yq }));
        }
    }
    Ok(None)
}

/// `p` thermomajorizes `q`: the curve of `p` lies nowhere below that of `q`.
pub fn thermomajorizes(p: &ClassicalState, q: &ClassicalState, beta: f64) -> Result<bool> {
    Ok(thermo_violation(p, q, beta)?.is_none())
}

/// Column-stochastic `T ≥ 0` with `T·g = g` and `T·p = q`, or `None` when no
/// such matrix exists.
pub fn gibbs_stochastic_feasible(
    p: &ClassicalState,
    q: &ClassicalState,
    beta: f64,
) -> Result<Option<DMatrix<f64>>> {
    p.same_levels(q)?;
    let g = p.gibbs_weights(beta)?;
    let d = p.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<microlp::Variable>> = (0..d)
        .map(|_| (0..d).map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect())
        .collect();
    for j in 0..d {
        let col: Vec<_> = vars.iter().map(|row| (row[j], 1.0)).collect();
        lp.add_constraint(&col, ComparisonOp::Eq, 1.0);
    }
    // The last row of each balance is implied by the column sums.
    for i in 0..d.saturating_sub(1) {
        let row_g: Vec<_> = (0..d).map(|j| (vars[i][j], g[j])).collect();
        lp.add_constraint(&row_g, ComparisonOp::Eq, g[i]);
        let row_p: Vec<_> = (0..d)
            .filter(|&j| p.probs[j] != 0.0)
            .map(|j| (vars[i][j], p.probs[j]))
            .collect();
        lp.add_constraint(&row_p, ComparisonOp::Eq, q.probs[i]);
    }
    let solution = match lp.solve() {
        Ok(microlp::SolveOutcome::Solution(s)) => s,
        Ok(microlp::SolveOutcome::Interrupted(_)) => {
            return Err(Error::Lp("solver stopped before finding an assignment".into()))
        }
        Err(microlp::Error::Infeasible) => return Ok(None),
        Err(e) => return Err(Error::Lp(e.to_string())),
    };
    let mut t = DMatrix::from_fn(d, d, |i, j| solution.var_value(vars[i][j]));
    let min = t.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -LP_NEG_TOL {
        return Err(Error::Lp(format!("solution has negative entry {min:.3e}")));
    }
    t.iter_mut().for_each(|x| *x = x.max(0.0));
    let r = stochastic_residual(&t, &g, &p.probs, &q.probs);
    if r > LP_RESIDUAL_TOL {
        return Err(Error::Lp(format!("equality residual {r:.3e} exceeds {LP_RESIDUAL_TOL:.0e}")));
    }
    Ok(Some(t))
}

/// Largest violation of column sums, `T·g = g` and `T·p = q`.
pub fn stochastic_residual(t: &DMatrix<f64>, g: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let d = t.nrows();
    let mut r: f64 = 0.0;
    for j in 0..d {
        r = r.max(((0..d).map(|i| t[(i, j)]).sum::<f64>() - 1.0).abs());
    }
    for i in 0..d {
        let tg: f64 = (0..d).map(|j| t[(i, j)] * g[j]).sum();
        let tp: f64 = (0..d).map(|j| t[(i, j)] * p[j]).sum();
        r = r.max((tg - g[i]).abs()).max((tp - q[i]).abs());
    }
    r
}

/// `T·p` on the levels of `p`.
pub fn apply_classical_map(t: &DMatrix<f64>, p: &ClassicalState) -> Result<ClassicalState> {
    if t.nrows() != p.len() || t.ncols() != p.len() {
        return Err(Error::Argument(format!(
            "map is {}x{}, state has {} levels",
            t.nrows(),
            t.ncols(),
            p.len()
        )));
    }
    let q: Vec<f64> = (0..p.len())
        .map(|i| (0..p.len()).map(|j| t[(i, j)] * p.probs[j]).sum::<f64>().max(0.0))
        .collect();
    let total: f64 = q.iter().sum();
    ClassicalState::new(
        q.iter().map(|x| x / total).collect(),
        p.energies.clone(),
        p.basis.clone(),
    )
}

/// How the energy window on each eigenvector's target is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    /// Every eigenvector with nonzero weight must satisfy `0 < w_l ≤ 1`.
    #[default]
    Strict,
    /// Take the least-violating target and record the violation.
    Relaxed,
}

/// Default ℓ¹ radius of the lattice search.
pub const DEFAULT_SEARCH_RADIUS: u32 = 8;
/// Eigenvalues at or below this are exempt from the window.
pub const NULL_EIGENVALUE: f64 = 1e-12;
/// Amplitudes at or below this are dropped from eigenvectors.
const AMPLITUDE_EPS: f64 = 1e-13;
const WINDOW_TOL: f64 = 1e-12;

/// One energy component `f_{jc′}|E_{c′}⟩` of an eigenvector and the ladder
/// shifts `m_{jc′,l}` with `E_{c[j]} − E_{c′} = Σ_l m_{jc′,l} Δ̃_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportTerm {
    pub index: usize,
    pub amplitude: Complex64,
    pub shifts: Vec<i64>,
}

/// Eigenvector `ψ_j` of the target, its eigenvalue and its classical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub eigenvalue: f64,
    /// Basis index `c[j]` of the energy eigenstate standing in for `ψ_j`.
    pub target: usize,
    pub target_energy: EnergyVector,
    pub support: Vec<SupportTerm>,
    /// `w_l = Σ_{c′} m_{jc′,l}|f_{jc′}|²` per ladder.
    pub window: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowViolation {
    pub eigenvector: usize,
    pub ladder: usize,
    pub window: f64,
}

/// Classical stand-in for `ρ′^{⊗μ}` and the data needed to rotate it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalTargetPlan {
    pub mu: usize,
    pub policy: WindowPolicy,
    pub ladders: IntegerBasis,
    /// The `μ`-copy system the plan lives on.
    pub system: HamiltonianJson,
    /// Entries in order of decreasing eigenvalue.
    pub entries: Vec<PlanEntry>,
    pub violations: Vec<WindowViolation>,
    /// `true` when the target is block diagonal in energy and the rotation
    /// needs no ladder shifts.
    pub incoherent_target: bool,
}

impl ClassicalTargetPlan {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn subsystems(&self) -> Result<(Arc<FrequencyBasis>, Vec<Subsystem>)> {
        self.system.to_subsystems()
    }

    /// `V = Σ_j |ψ_j⟩⟨E_{c[j]}|`.
    pub fn rotation(&self) -> CMatrix {
        let d = self.dim();
        let mut v = CMatrix::zeros(d, d);
        for e in &self.entries {
            for s in &e.support {
                v[(s.index, e.target)] = s.amplitude;
            }
        }
        v
    }

    /// `Σ_j λ_j |ψ_j⟩⟨ψ_j|` rebuilt from the plan.
    pub fn target_matrix(&self) -> CMatrix {
        let d = self.dim();
        let mut m = CMatrix::zeros(d, d);
        for e in &self.entries {
            let psi = self.eigenvector(e);
            m += (&psi * psi.adjoint()).scale(e.eigenvalue);
        }
        m
    }

    fn eigenvector(&self, e: &PlanEntry) -> CVector {
        let mut psi = CVector::zeros(self.dim());
        for s in &e.support {
            psi[s.index] = s.amplitude;
        }
        psi
    }

    /// The classical state `Σ_j λ_j |E_{c[j]}⟩⟨E_{c[j]}|`.
    pub fn classical_state(&self) -> Result<ClassicalState> {
        let (basis, system) = self.subsystems()?;
        let mut probs = vec![0.0; self.dim()];
        for e in &self.entries {
            probs[e.target] = e.eigenvalue.max(0.0);
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        ClassicalState::new(probs, composite_energies(&basis, &system), basis)
    }

    /// Probability of each ladder shift on ladder `l` when the input is the
    /// plan-basis state with weights `weights[j]` on `|E_{c[j]}⟩`.
    pub fn shift_distribution(&self, l: usize, weights: &[f64]) -> Vec<(i64, f64)> {
        let mut acc: HashMap<i64, f64> = HashMap::new();
        for (e, &w) in self.entries.iter().zip(weights) {
            for s in &e.support {
                *acc.entry(s.shifts.get(l).copied().unwrap_or(0)).or_default() += w * s.amplitude.norm_sqr();
            }
        }
        let mut out: Vec<(i64, f64)> = acc.into_iter().filter(|&(_, p)| p > 0.0).collect();
        out.sort_by_key(|&(c, _)| c);
        out
    }

    /// Eigenvalues in plan order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.eigenvalue).collect()
    }

    /// Largest `|m|` over all entries with weight and ladders.
    pub fn max_shift(&self) -> i64 {
        self.entries
            .iter()
            .flat_map(|e| e.support.iter().flat_map(|s| s.shifts.iter().map(|m| m.abs())))
            .max()
            .unwrap_or(0)
    }
}

/// Classes of basis indices whose energies differ by elements of `ℐ(lattice)`.
fn lattice_classes(energies: &[EnergyVector], lattice: &IntegerBasis) -> Vec<Vec<usize>> {
    let mut reps: Vec<(EnergyVector, Vec<usize>)> = Vec::new();
    for (i, e) in energies.iter().enumerate() {
        match reps.iter_mut().find(|(r, _)| in_resonant_span(&(e - r), lattice).is_some()) {
            Some((_, members)) => members.push(i),
            None => reps.push((e.clone(), vec![i])),
        }
    }
    reps.into_iter().map(|(_, m)| m).collect()
}

/// Eigen-decomposition of `rho` block by block over the given index classes.
fn blockwise_eigh(m: &CMatrix, classes: &[Vec<usize>]) -> Vec<(f64, CVector)> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n);
    for class in classes {
        let k = class.len();
        let sub = CMatrix::from_fn(k, k, |a, b| m[(class[a], class[b])]);
        let (vals, vecs) = linalg::eigh(&sub);
        for (c, &val) in vals.iter().enumerate() {
            let mut v = CVector::zeros(n);
            for (a, &i) in class.iter().enumerate() {
                let z = vecs[(a, c)];
                v[i] = if z.norm() <= AMPLITUDE_EPS { linalg::ZERO } else { z };
            }
            let norm = v.norm();
            out.push((val.max(0.0), v.unscale(norm)));
        }
    }
    out
}

/// All integer vectors of the given length with `ℓ¹ ≤ radius`, ordered by
/// norm and then lexicographically.
fn lattice_offsets(len: usize, radius: u32) -> Vec<Vec<i64>> {
    let r = radius as i64;
    let mut out: Vec<Vec<i64>> = vec![vec![]];
    for _ in 0..len {
        let mut next = Vec::new();
        for v in &out {
            let used: i64 = v.iter().map(|x: &i64| x.abs()).sum();
            for x in -(r - used)..=(r - used) {
                let mut w = v.clone();
                w.push(x);
                next.push(w);
            }
        }
        out = next;
    }
    out.sort_by(|a, b| {
        let na: i64 = a.iter().map(|x| x.abs()).sum();
        let nb: i64 = b.iter().map(|x| x.abs()).sum();
        na.cmp(&nb).then_with(|| a.cmp(b))
    });
    out
}

fn to_i64(coeffs: Vec<num_bigint::BigInt>) -> Result<Vec<i64>> {
    coeffs
        .iter()
        .map(|c| c.to_i64().ok_or_else(|| Error::NumericRange(format!("shift {c} out of range"))))
        .collect()
}

/// Number of violated window sides and their total magnitude.
fn window_score(w: &[f64]) -> (usize, f64) {
    let mut count = 0;
    let mut mag = 0.0;
    for &x in w {
        if x <= WINDOW_TOL {
            count += 1;
            mag += (-x).max(0.0);
        } else if x > 1.0 + WINDOW_TOL {
            count += 1;
            mag += x - 1.0;
        }
    }
    (count, mag)
}

/// Search state for one eigenvector: candidate index, shifts, window
/// weights and the (violated sides, magnitude) score.
type Candidate = (usize, Vec<Vec<i64>>, Vec<f64>, (usize, f64));

/// Designs `ρ′_{cl,μ}`: every eigenvector `ψ_j` of `ρ′^{⊗μ}` (by decreasing
/// eigenvalue) gets a distinct energy eigenstate `E_{c[j]}` in
/// `E_{c′} + ℐ(ladders)` whose per-ladder window `w_l = Σ_{c′} m|f|²` lies in
/// `(0, 1]`. Candidates are searched by increasing ℓ¹ norm of the lattice
/// offset up to `radius`, ties broken lexicographically.
///
/// A target that is block diagonal in energy needs no rotation through the
/// ladders: each eigenvector is labelled by a state of its own energy and
/// all shifts are zero.
pub fn build_classical_target(
    rho_prime: &DensityOperator,
    mu: usize,
    ladders: &IntegerBasis,
    policy: WindowPolicy,
    radius: u32,
) -> Result<(ClassicalTargetPlan, ClassicalState)> {
    if mu == 0 {
        return Err(Error::Argument("mu must be at least 1".into()));
    }
    let basis = rho_prime.basis().clone();
    let single_energies = rho_prime.energies();
    let own_modes = coherent_modes(rho_prime, crate::modes::DEFAULT_MAG_THRESHOLD);
    let incoherent = own_modes.is_incoherent();
    let own_lattice = independent_basis(&own_modes.to_vec(), &basis);
    let classes = if incoherent {
        energy_blocks(&single_energies)
    } else {
        lattice_classes(&single_energies, &own_lattice)
    };
    let single = blockwise_eigh(rho_prime.matrix(), &classes);

    let power = tensor_power(rho_prime, mu)?;
    let system: Vec<Subsystem> = power.subsystems().to_vec();
    let energies = power.energies();
    let d = energies.len();
    let d1 = single.len();

    // Product eigenvectors, sorted by decreasing eigenvalue (stable).
    let mut eig: Vec<(f64, Vec<usize>)> = (0..d)
        .map(|flat| {
            let mut digits = vec![0usize; mu];
            let mut rem = flat;
            for k in (0..mu).rev() {
                digits[k] = rem % d1;
                rem /= d1;
            }
            let lambda = digits.iter().map(|&a| single[a].0).product();
            (lambda, digits)
        })
        .collect();
    eig.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut by_energy: HashMap<&EnergyVector, Vec<usize>> = HashMap::new();
    for (i, e) in energies.iter().enumerate() {
        by_energy.entry(e).or_default().push(i);
    }
    let offsets = if incoherent {
        vec![vec![0; ladders.len()]]
    } else {
        lattice_offsets(ladders.len(), radius)
    };
    let width = basis.len();
    let mut used: HashSet<usize> = HashSet::new();
    let mut entries = Vec::with_capacity(d);
    let mut violations = Vec::new();

    for (j, (lambda, digits)) in eig.iter().enumerate() {
        let mut psi = CVector::from_element(1, linalg::ONE);
        for &a in digits {
            psi = psi.kronecker(&single[a].1);
        }
        let support: Vec<(usize, Complex64)> = psi
            .iter()
            .enumerate()
            .filter(|(_, z)| z.norm() > 0.0)
            .map(|(i, z)| (i, *z))
            .collect();
        let reference = &energies[support[0].0];
        // Offsets of each support energy from the reference, in ladder units.
        let rel: Vec<Vec<i64>> = support
            .iter()
            .map(|&(i, _)| {
                in_resonant_span(&(&energies[i] - reference), ladders)
                    .ok_or(Error::ModeCondition)
                    .and_then(to_i64)
            })
            .collect::<Result<_>>()?;

        let mut best: Option<Candidate> = None;
        for t in &offsets {
            let target_energy = reference + &ladders.combine(
                &t.iter().map(|&x| num_bigint::BigInt::from(x)).collect::<Vec<_>>(),
                width,
            );
            let Some(slot) = by_energy
                .get(&target_energy)
                .and_then(|list| list.iter().copied().find(|i| !used.contains(i)))
            else {
                continue;
            };
            let shifts: Vec<Vec<i64>> = rel
                .iter()
                .map(|r| t.iter().zip(r).map(|(a, b)| a - b).collect())
                .collect();
            let window: Vec<f64> = (0..ladders.len())
                .map(|l| {
                    support
                        .iter()
                        .zip(&shifts)
                        .map(|((_, f), m)| m[l] as f64 * f.norm_sqr())
                        .sum()
                })
                .collect();
            let score = if incoherent { (0, 0.0) } else { window_score(&window) };
            let better = match &best {
                None => true,
                Some((_, _, _, s)) => score.0 < s.0 || (score.0 == s.0 && score.1 < s.1),
            };
            if better {
                let done = score.0 == 0;
                best = Some((slot, shifts, window, score));
                if done {
                    break;
                }
            }
        }
        let Some((slot, shifts, window, score)) = best else {
            return Err(Error::TargetWindow {
                eigenvector: j,
                detail: format!("no unused energy eigenstate within lattice radius {radius}"),
            });
        };
        if score.0 > 0 && *lambda > NULL_EIGENVALUE {
            if policy == WindowPolicy::Strict {
                let side = if window.iter().any(|&w| w <= WINDOW_TOL) {
                    "lower (w_l > 0)"
                } else {
                    "upper (w_l <= 1)"
                };
                return Err(Error::TargetWindow {
                    eigenvector: j,
                    detail: format!("best candidate violates the {side} side; windows {window:?}"),
                });
            }
            for (l, &w) in window.iter().enumerate() {
                if w <= WINDOW_TOL || w > 1.0 + WINDOW_TOL {
                    violations.push(WindowViolation { eigenvector: j, ladder: l, window: w });
                }
            }
        }
        used.insert(slot);
        entries.push(PlanEntry {
            eigenvalue: *lambda,
            target: slot,
            target_energy: energies[slot].clone(),
            support: support
                .iter()
                .zip(shifts)
                .map(|(&(index, amplitude), shifts)| SupportTerm { index, amplitude, shifts })
                .collect(),
            window,
        });
    }

    let plan = ClassicalTargetPlan {
        mu,
        policy,
        ladders: ladders.clone(),
        system: HamiltonianJson::from_subsystems(&basis, &system),
        entries,
        violations,
        incoherent_target: incoherent,
    };
    let state = plan.classical_state()?;
    Ok((plan, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{gibbs_state_of, relative_entropy, DensityOperator, HamiltonianSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis() -> Arc<FrequencyBasis> {
        Arc::new(FrequencyBasis::single("w", 1.0).unwrap())
    }

    fn levels(e: &[i64]) -> Vec<EnergyVector> {
        e.iter().map(|&x| EnergyVector::from_ints(&[x])).collect()
    }

    fn cs(p: &[f64], e: &[i64]) -> ClassicalState {
        ClassicalState::new(p.to_vec(), levels(e), basis()).unwrap()
    }

    fn qubit_state(m: CMatrix) -> DensityOperator {
        let b = basis();
        let h = HamiltonianSpec::from_energies(b.clone(), levels(&[0, 1])).unwrap();
        DensityOperator::new(m, b, vec![Subsystem::new("S", h)]).unwrap()
    }

    fn plus() -> CMatrix {
        CMatrix::from_element(2, 2, Complex64::new(0.5, 0.0))
    }

    fn unit_ladder() -> IntegerBasis {
        IntegerBasis::new(levels(&[1])).unwrap()
    }

    #[test]
    fn thermomajorization_examples() {
        let e = [0, 1, 2];
        let beta = 0.8;
        let g = ClassicalState::gibbs(levels(&e), basis(), beta).unwrap();
        let p = cs(&[0.2, 0.5, 0.3], &e);
        assert!(thermomajorizes(&p, &p, beta).unwrap());
        let ground = cs(&[1.0, 0.0, 0.0], &e);
        assert!(thermomajorizes(&ground, &g, beta).unwrap());
        assert!(thermomajorizes(&p, &g, beta).unwrap());
        let top = cs(&[0.0, 0.0, 1.0], &e);
        assert!(!thermomajorizes(&g, &top, beta).unwrap());
        let v = thermo_violation(&g, &top, beta).unwrap().unwrap();
        assert!(v.curve_q > v.curve_p);
    }

    #[test]
    fn curve_of_gibbs_is_diagonal() {
        let g = [0.5, 0.3, 0.2];
        let pts = thermo_curve(&g, &g);
        for (x, y) in pts {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn lp_examples() {
        let e = [0, 1, 3];
        let beta = 0.5;
        let p = cs(&[0.1, 0.6, 0.3], &e);
        let t = gibbs_stochastic_feasible(&p, &p, beta).unwrap().unwrap();
        let q = apply_classical_map(&t, &p).unwrap();
        assert!(q.probs().iter().zip(p.probs()).all(|(a, b)| (a - b).abs() < 1e-8));

        let g = ClassicalState::gibbs(levels(&e), basis(), beta).unwrap();
        let t = gibbs_stochastic_feasible(&p, &g, beta).unwrap().unwrap();
        let out = apply_classical_map(&t, &p).unwrap();
        assert!(out.probs().iter().zip(g.probs()).all(|(a, b)| (a - b).abs() < 1e-8));

        let top = cs(&[0.0, 0.0, 1.0], &e);
        assert!(gibbs_stochastic_feasible(&g, &top, beta).unwrap().is_none());
    }

    #[test]
    fn rejects_mismatched_levels() {
        let p = cs(&[0.5, 0.5], &[0, 1]);
        let q = cs(&[0.5, 0.5], &[0, 2]);
        assert!(thermomajorizes(&p, &q, 1.0).is_err());
        assert!(gibbs_stochastic_feasible(&p, &q, 1.0).is_err());
    }

    fn random_pair(rng: &mut ChaCha8Rng, d: usize, beta: f64) -> (ClassicalState, ClassicalState) {
        let e: Vec<i64> = {
            let mut v: Vec<i64> = (0..d).map(|_| rng.random_range(0..4)).collect();
            v.sort();
            v
        };
        let draw = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..d).map(|_| -rng.random::<f64>().ln()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let p = draw(rng);
        let q = if rng.random_bool(0.5) {
            draw(rng)
        } else {
            // q = T p for a random Gibbs-stochastic T: mix with Gibbs
            let g = gibbs_weights(&e.iter().map(|&x| x as f64).collect::<Vec<_>>(), beta).unwrap();
            let a: f64 = rng.random();
            p.iter().zip(&g).map(|(pi, gi)| a * pi + (1.0 - a) * gi).collect()
        };
        (cs(&p, &e), cs(&q, &e))
    }

    #[test]
    fn oracle_equivalence_and_monotone_free_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let beta = 0.9;
        for _ in 0..150 {
            let d = rng.random_range(2..=5);
            let (p, q) = random_pair(&mut rng, d, beta);
            let curve = thermomajorizes(&p, &q, beta).unwrap();
            let lp = gibbs_stochastic_feasible(&p, &q, beta).unwrap();
            assert_eq!(curve, lp.is_some());
            if lp.is_some() {
                let dp = p.relative_entropy_to_gibbs(beta).unwrap();
                let dq = q.relative_entropy_to_gibbs(beta).unwrap();
                assert!(dq <= dp + 1e-8);
            }
        }
    }

    #[test]
    fn plan_for_plus_state() {
        let rho_p = qubit_state(plus());
        let (plan, state) =
            build_classical_target(&rho_p, 1, &unit_ladder(), WindowPolicy::Strict, DEFAULT_SEARCH_RADIUS).unwrap();
        assert_eq!(plan.entries[0].target, 1);
        let shifts: Vec<i64> = plan.entries[0].support.iter().map(|s| s.shifts[0]).collect();
        assert_eq!(shifts, vec![1, 0]);
        assert!((plan.entries[0].window[0] - 0.5).abs() < 1e-15);
        assert_eq!(plan.entries[1].target, 0);
        assert_eq!(state.probs(), &[0.0, 1.0]);
        // Hadamard-like rotation maps |1⟩ to |+⟩
        let v = plan.rotation();
        assert!(linalg::unitarity_residual(&v) < 1e-12);
        assert!(linalg::max_abs(&(plan.target_matrix() - rho_p.matrix())) < 1e-12);
        let dist = plan.shift_distribution(0, &[1.0, 0.0]);
        assert_eq!(dist.iter().map(|d| d.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(dist.iter().all(|d| (d.1 - 0.5).abs() < 1e-15));
    }

    #[test]
    fn incoherent_target_needs_no_shifts() {
        let rho_p = qubit_state(linalg::diag_real(&[0.7, 0.3]));
        let (plan, state) =
            build_classical_target(&rho_p, 2, &unit_ladder(), WindowPolicy::Strict, DEFAULT_SEARCH_RADIUS).unwrap();
        assert!(plan.incoherent_target);
        assert_eq!(plan.max_shift(), 0);
        let power = tensor_power(&rho_p, 2).unwrap();
        for (a, b) in state.probs().iter().zip(power.populations()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mixed_coherent_target_needs_relaxed_window_at_mu_one() {
        // eigenvalues (0.8, 0.2), ψ₀ = √0.3|0⟩ + √0.7|1⟩
        let (a, b) = (0.3f64.sqrt(), 0.7f64.sqrt());
        let psi0 = CVector::from_vec(vec![Complex64::new(a, 0.0), Complex64::new(b, 0.0)]);
        let psi1 = CVector::from_vec(vec![Complex64::new(b, 0.0), Complex64::new(-a, 0.0)]);
        let m = (&psi0 * psi0.adjoint()).scale(0.8) + (&psi1 * psi1.adjoint()).scale(0.2);
        let rho_p = qubit_state(m);
        let strict = build_classical_target(&rho_p, 1, &unit_ladder(), WindowPolicy::Strict, 8);
        assert!(matches!(strict, Err(Error::TargetWindow { .. })));
        let (plan, state) = build_classical_target(&rho_p, 1, &unit_ladder(), WindowPolicy::Relaxed, 8).unwrap();
        assert_eq!(plan.entries[0].target, 1);
        assert!(!plan.violations.is_empty());
        assert!(plan.violations.iter().all(|v| v.eigenvector == 1));
        assert!((state.probs()[1] - 0.8).abs() < 1e-12);
        // spectrum is preserved exactly
        let mut eigs = rho_p.eigenvalues();
        eigs.reverse();
        for (x, y) in plan.eigenvalues().iter().zip(&eigs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_entropy_gap_bound() {
        // (1/μ)D(ρ′_cl‖τ^⊗μ) ≤ (1/μ)D(ρ′^⊗μ‖τ^⊗μ) + β·ΣΔ̃/μ, with equality exactly
        // when every weighted eigenvector sits at the top of its window (μ = 2 here).
        let beta = 0.7;
        for mu in 1..=3 {
            let rho_p = qubit_state(plus());
            let (plan, cl) =
                build_classical_target(&rho_p, mu, &unit_ladder(), WindowPolicy::Relaxed, 8).unwrap();
            let (b, sys) = plan.subsystems().unwrap();
            let tau = gibbs_state_of(b, sys.clone(), beta).unwrap();
            let power = tensor_power(&rho_p, mu).unwrap();
            let lhs = cl.relative_entropy_to_gibbs(beta).unwrap() / mu as f64;
            let rhs = relative_entropy(&power, &tau) / mu as f64 + beta / mu as f64;
            let top = plan.entries[0].window[0];
            if mu == 2 {
                assert!((top - 1.0).abs() < 1e-12);
                assert!((lhs - rhs).abs() < 1e-12, "mu={mu}: {lhs} vs {rhs}");
            } else {
                assert!(top < 1.0);
                assert!(lhs < rhs, "mu={mu}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn plan_round_trips_through_json() {
        let rho_p = qubit_state(plus());
        let (plan, state) = build_classical_target(&rho_p, 2, &unit_ladder(), WindowPolicy::Relaxed, 8).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: ClassicalTargetPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        let json = serde_json::to_string(&state).unwrap();
        let back: ClassicalState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn lattice_offsets_are_ordered() {
        let o = lattice_offsets(2, 2);
        assert_eq!(o[0], vec![0, 0]);
        assert_eq!(o[1..5].to_vec(), vec![vec![-1, 0], vec![0, -1], vec![0, 1], vec![1, 0]]);
        assert_eq!(o.len(), 13);
    }

    proptest! {
        #[test]
        fn plan_spectrum_matches_target(seed in 0u64..1000, mu in 1usize..=2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = linalg::random_density_matrix(2, &mut rng);
            let rho_p = qubit_state(m);
            let (plan, state) = build_classical_target(&rho_p, mu, &unit_ladder(), WindowPolicy::Relaxed, 8).unwrap();
            let power = tensor_power(&rho_p, mu).unwrap();
            let mut want = power.eigenvalues();
            want.sort_by(|a, b| b.total_cmp(a));
            let mut got = state.probs().to_vec();
            got.sort_by(|a, b| b.total_cmp(a));
            for (x, y) in got.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(linalg::unitarity_residual(&plan.rotation()) < 1e-10);
            prop_assert!(linalg::max_abs(&(plan.target_matrix() - power.matrix())) < 1e-10);
        }

        #[test]
        fn feasible_map_never_raises_free_energy(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(2..=4);
            let (p, q) = random_pair(&mut rng, d, 1.1);
            if let Some(t) = gibbs_stochastic_feasible(&p, &q, 1.1).unwrap() {
                let out = apply_classical_map(&t, &p).unwrap();
                prop_assert!(out.relative_entropy_to_gibbs(1.1).unwrap() <= p.relative_entropy_to_gibbs(1.1).unwrap() + 1e-8);
            }
        }
    }
}
