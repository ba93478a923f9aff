//! Coherent resources on truncated half-infinite ladders and the
//! energy-conserving unitaries that use them to implement a system rotation.
//!
//! A rotation `V` on the system moves weight between levels whose energies
//! differ by integer combinations of ladder spacings `Δ_l`. The unitary
//!
//! ```text
//! U = Σ_{c,c′} V_{c′c} |c′⟩⟨c| ⊗ ⨂_l S_l^{m_l(c,c′)} + W
//! ```
//!
//! with `E_c − E_{c′} = Σ_l m_l Δ_l` moves each ladder up by exactly the
//! energy the system lost. On a truncated ladder some columns would shift
//! off the ends; those columns are completed by `W`, an orthonormal
//! completion inside each total-energy block.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::classical::ClassicalTargetPlan;
use crate::error::{Error, Result};
use crate::modes::{in_resonant_span, IntegerBasis};
use crate::qstate::density::{composite_energies, matrix_trace_distance, partial_trace_matrix};
use crate::qstate::linalg::{self, CMatrix, CVector};
use crate::qstate::{max_dim, DensityOperator, EnergyVector, FrequencyBasis, HamiltonianSpec, Subsystem};

/// Unitarity residual accepted for an assembled operator.
pub const UNITARITY_TOL: f64 = 1e-9;
/// Boundary mass above which a step is flagged.
pub const LEAKAGE_WARNING: f64 = 1e-6;
/// Extra ladder levels beyond the expected drift.
pub const TRUNCATION_MARGIN: usize = 8;
/// `|V_{c′c}|` at or below this is treated as a structural zero.
const AMPLITUDE_EPS: f64 = 1e-13;

/// `|η_{L,M}⟩ = L^{-1/2} Σ_{i<L} |M+i⟩` on the levels `0..=truncation` of a
/// ladder with spacing `mode`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceState {
    pub width: usize,
    pub offset: usize,
    pub mode: EnergyVector,
    pub truncation: usize,
}

impl ResourceState {
    pub fn new(width: usize, offset: usize, mode: EnergyVector, truncation: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Argument("resource width L must be at least 1".into()));
        }
        if offset + width > truncation {
            return Err(Error::Argument(format!(
                "M + L = {} exceeds truncation {truncation}",
                offset + width
            )));
        }
        Ok(ResourceState { width, offset, mode, truncation })
    }

    pub fn dim(&self) -> usize {
        self.truncation + 1
    }

    pub fn hamiltonian(&self, basis: &Arc<FrequencyBasis>) -> Result<HamiltonianSpec> {
        HamiltonianSpec::ladder(basis.clone(), &self.mode, self.dim())
    }

    /// The pure state on a subsystem with the given label.
    pub fn state(&self, basis: &Arc<FrequencyBasis>, label: &str) -> Result<DensityOperator> {
        let h = self.hamiltonian(basis)?;
        let mut psi = CVector::zeros(self.dim());
        let amp = Complex64::new(1.0 / (self.width as f64).sqrt(), 0.0);
        for k in self.offset..self.offset + self.width {
            psi[k] = amp;
        }
        DensityOperator::from_pure(&psi, basis.clone(), vec![Subsystem::new(label, h)])
    }
}

/// `M + L + ν·l_max + margin`.
pub fn default_truncation(width: usize, offset: usize, nu: usize, max_jump: usize) -> usize {
    offset + width + nu * max_jump + TRUNCATION_MARGIN
}

/// Single-ladder resource labelled `Q`.
pub fn make_resource(
    width: usize,
    offset: usize,
    mode: &EnergyVector,
    truncation: usize,
    basis: &Arc<FrequencyBasis>,
) -> Result<DensityOperator> {
    ResourceState::new(width, offset, mode.clone(), truncation)?.state(basis, "Q")
}

/// Label of ladder `l` (0-based) in a multi-ladder resource.
pub fn ladder_label(l: usize) -> String {
    format!("Q{}", l + 1)
}

/// Product of the given resources, labelled `Q1, Q2, …`.
pub fn make_resources(specs: &[ResourceState], basis: &Arc<FrequencyBasis>) -> Result<DensityOperator> {
    let mut out: Option<DensityOperator> = None;
    for (l, s) in specs.iter().enumerate() {
        let r = s.state(basis, &ladder_label(l))?;
        out = Some(match out {
            None => r,
            Some(acc) => crate::qstate::tensor(&acc, &r)?,
        });
    }
    out.ok_or_else(|| Error::Argument("no resources requested".into()))
}

/// Sparse column: `(row, value)` pairs.
type Column = Vec<(usize, Complex64)>;

/// The assembled operator on system ⊗ ladders.
#[derive(Debug, Clone)]
pub struct ShiftCompensatedUnitary {
    v: CMatrix,
    basis: Arc<FrequencyBasis>,
    system: Vec<Subsystem>,
    ladders: IntegerBasis,
    ladder_dims: Vec<usize>,
    /// `shifts[c][c′]` for every `V_{c′c}` that is not a structural zero.
    shifts: Vec<HashMap<usize, Vec<i64>>>,
    columns: Vec<Column>,
    /// Columns taken from the ideal shift formula rather than the completion.
    ideal: Vec<bool>,
    residual: f64,
    plan: Option<ClassicalTargetPlan>,
}

impl ShiftCompensatedUnitary {
    /// Assembles `U` for a system unitary `v`. Ladder `l` has spacing
    /// `ladders[l]` and `ladder_dims[l]` levels.
    pub fn new(
        v: &CMatrix,
        basis: Arc<FrequencyBasis>,
        system: Vec<Subsystem>,
        ladders: IntegerBasis,
        ladder_dims: Vec<usize>,
    ) -> Result<Self> {
        let d: usize = system.iter().map(Subsystem::dim).product();
        if v.nrows() != d || v.ncols() != d {
            return Err(Error::Argument(format!(
                "V is {}x{}, system dimension is {d}",
                v.nrows(),
                v.ncols()
            )));
        }
        let vres = linalg::unitarity_residual(v);
        if vres > UNITARITY_TOL {
            return Err(Error::NotUnitary { residual: vres, tolerance: UNITARITY_TOL });
        }
        if ladder_dims.len() != ladders.len() || ladder_dims.contains(&0) {
            return Err(Error::Argument("need one positive dimension per ladder".into()));
        }
        let lad_total = ladder_dims
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| Error::ResourceLimit("dimension overflow".into()))?;
        if lad_total > max_dim() {
            return Err(Error::ResourceLimit(format!(
                "system ⊗ ladders has dimension {lad_total}, cap is {}",
                max_dim()
            )));
        }
        let big_d = lad_total;
        let q: usize = big_d / d;
        let energies = composite_energies(&basis, &system);

        // Shift exponents from E_c − E_c′ = Σ m Δ.
        let mut shifts: Vec<HashMap<usize, Vec<i64>>> = vec![HashMap::new(); d];
        for c in 0..d {
            for cp in 0..d {
                if v[(cp, c)].norm() <= AMPLITUDE_EPS {
                    continue;
                }
                let m = in_resonant_span(&(&energies[c] - &energies[cp]), &ladders)
                    .ok_or(Error::ModeCondition)?
                    .iter()
                    .map(|x| x.to_i64().ok_or_else(|| Error::NumericRange(format!("shift {x} out of range"))))
                    .collect::<Result<Vec<i64>>>()?;
                shifts[c].insert(cp, m);
            }
        }

        // Total-energy blocks: system energies split into classes modulo the
        // ladder lattice, each with integer coordinates relative to its class.
        let mut reps: Vec<EnergyVector> = Vec::new();
        let mut sys_key: Vec<(usize, Vec<i64>)> = Vec::with_capacity(d);
        for e in &energies {
            let found = reps.iter().enumerate().find_map(|(r, rep)| {
                in_resonant_span(&(e - rep), &ladders).map(|c| (r, c))
            });
            let (class, coords) = match found {
                Some((r, c)) => (r, c.iter().map(|x| x.to_i64().unwrap_or(i64::MAX)).collect()),
                None => {
                    reps.push(e.clone());
                    (reps.len() - 1, vec![0; ladders.len()])
                }
            };
            sys_key.push((class, coords));
        }
        let strides = strides(&ladder_dims);
        let digits = |k: usize| -> Vec<usize> {
            strides.iter().zip(&ladder_dims).map(|(s, n)| (k / s) % n).collect()
        };
        let mut block_index: HashMap<(usize, Vec<i64>), usize> = HashMap::new();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut block_of = vec![0usize; big_d];
        for (flat, slot) in block_of.iter_mut().enumerate() {
            let (s, k) = (flat / q, flat % q);
            let (class, coords) = &sys_key[s];
            let key: Vec<i64> = coords.iter().zip(digits(k)).map(|(a, b)| a + b as i64).collect();
            let b = *block_index.entry((*class, key)).or_insert_with(|| {
                blocks.push(Vec::new());
                blocks.len() - 1
            });
            blocks[b].push(flat);
            *slot = b;
        }

        // Ideal columns.
        let mut columns: Vec<Column> = vec![Vec::new(); big_d];
        let mut ideal = vec![false; big_d];
        for c in 0..d {
            for k in 0..q {
                let kd = digits(k);
                let mut col = Vec::with_capacity(shifts[c].len());
                let mut inside = true;
                for (&cp, m) in &shifts[c] {
                    let mut target = 0usize;
                    for ((&kl, &ml), (&s, &n)) in kd.iter().zip(m).zip(strides.iter().zip(&ladder_dims)) {
                        let t = kl as i64 + ml;
                        if t < 0 || t >= n as i64 {
                            inside = false;
                            break;
                        }
                        target += t as usize * s;
                    }
                    if !inside {
                        break;
                    }
                    col.push((cp * q + target, v[(cp, c)]));
                }
                let flat = c * q + k;
                if inside {
                    col.sort_by_key(|e| e.0);
                    if col.iter().any(|&(row, _)| block_of[row] != block_of[flat]) {
                        return Err(Error::EnergyConservation { residual: f64::INFINITY, tolerance: 0.0 });
                    }
                    columns[flat] = col;
                    ideal[flat] = true;
                }
            }
        }

        // Completion inside each block.
        let mut residual: f64 = 0.0;
        for block in &blocks {
            let missing: Vec<usize> = block.iter().copied().filter(|&j| !ideal[j]).collect();
            if !missing.is_empty() {
                let pos: HashMap<usize, usize> = block.iter().enumerate().map(|(a, &i)| (i, a)).collect();
                let n = block.len();
                let mut frame: Vec<CVector> = block
                    .iter()
                    .filter(|&&j| ideal[j])
                    .map(|&j| {
                        let mut x = CVector::zeros(n);
                        for &(row, z) in &columns[j] {
                            x[pos[&row]] = z;
                        }
                        x
                    })
                    .collect();
                let order = missing.iter().chain(block.iter().filter(|j| ideal[**j]));
                let mut fresh: Vec<CVector> = Vec::new();
                for &j in order {
                    if fresh.len() == missing.len() {
                        break;
                    }
                    let mut x = CVector::zeros(n);
                    x[pos[&j]] = linalg::ONE;
                    for _ in 0..2 {
                        for f in frame.iter() {
                            let ov = f.dotc(&x);
                            x -= f * ov;
                        }
                    }
                    let norm = x.norm();
                    if norm > 1e-8 {
                        let x = x.unscale(norm);
                        frame.push(x.clone());
                        fresh.push(x);
                    }
                }
                if fresh.len() != missing.len() {
                    return Err(Error::NotUnitary { residual: 1.0, tolerance: UNITARITY_TOL });
                }
                for (&j, x) in missing.iter().zip(fresh) {
                    columns[j] = x
                        .iter()
                        .enumerate()
                        .filter(|(_, z)| z.norm() > 0.0)
                        .map(|(a, z)| (block[a], *z))
                        .collect();
                }
            }
            residual = residual.max(block_residual(block, &columns));
        }
        if residual > UNITARITY_TOL {
            return Err(Error::NotUnitary { residual, tolerance: UNITARITY_TOL });
        }
        Ok(ShiftCompensatedUnitary {
            v: v.clone(),
            basis,
            system,
            ladders,
            ladder_dims,
            shifts,
            columns,
            ideal,
            residual,
            plan: None,
        })
    }

    /// The rotation `V = Σ_j |ψ_j⟩⟨E_{c[j]}|` of a classical target plan.
    pub fn from_plan(plan: &ClassicalTargetPlan, ladder_dims: Vec<usize>) -> Result<Self> {
        let (basis, system) = plan.subsystems()?;
        let mut u = Self::new(&plan.rotation(), basis, system, plan.ladders.clone(), ladder_dims)?;
        u.plan = Some(plan.clone());
        Ok(u)
    }

    pub fn plan(&self) -> Option<&ClassicalTargetPlan> {
        self.plan.as_ref()
    }

    pub fn v(&self) -> &CMatrix {
        &self.v
    }

    pub fn basis(&self) -> &Arc<FrequencyBasis> {
        &self.basis
    }

    pub fn system(&self) -> &[Subsystem] {
        &self.system
    }

    pub fn ladders(&self) -> &IntegerBasis {
        &self.ladders
    }

    pub fn ladder_dims(&self) -> &[usize] {
        &self.ladder_dims
    }

    pub fn system_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// `‖U†U − I‖_max`, evaluated block by block.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Number of columns supplied by the completion `W`.
    pub fn completed_columns(&self) -> usize {
        self.ideal.iter().filter(|x| !**x).count()
    }

    /// Ladder shift `m_l(c, c′)`, if `V_{c′c}` is not a structural zero.
    pub fn shift(&self, c: usize, c_prime: usize) -> Option<&[i64]> {
        self.shifts[c].get(&c_prime).map(Vec::as_slice)
    }

    /// Dense matrix; only sensible for small dimensions.
    pub fn to_dense(&self) -> CMatrix {
        let n = self.dim();
        let mut u = CMatrix::zeros(n, n);
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, z) in col {
                u[(i, j)] = z;
            }
        }
        u
    }

    /// Numeric total energy of every joint basis state.
    pub fn joint_energies(&self) -> Vec<f64> {
        let sys: Vec<f64> = composite_energies(&self.basis, &self.system)
            .iter()
            .map(|e| e.value(&self.basis))
            .collect();
        let steps: Vec<f64> = self.ladders.elements().iter().map(|e| e.value(&self.basis)).collect();
        let st = strides(&self.ladder_dims);
        let q = self.dim() / self.system_dim();
        let mut out = Vec::with_capacity(self.dim());
        for e in &sys {
            for k in 0..q {
                let ladder: f64 = st
                    .iter()
                    .zip(&self.ladder_dims)
                    .zip(&steps)
                    .map(|((s, n), w)| ((k / s) % n) as f64 * w)
                    .sum();
                out.push(e + ladder);
            }
        }
        out
    }

    /// `U ρ U†` for a Hermitian `ρ` on system ⊗ ladders.
    pub fn conjugate(&self, rho: &CMatrix) -> CMatrix {
        let z = self.right_mul_dagger(rho);
        self.right_mul_dagger(&z.adjoint()).adjoint()
    }

    /// `A U†`.
    fn right_mul_dagger(&self, a: &CMatrix) -> CMatrix {
        let n = self.dim();
        let mut out = CMatrix::zeros(a.nrows(), n);
        for (k, col) in self.columns.iter().enumerate() {
            let src = a.column(k).into_owned();
            for &(j, u) in col {
                out.column_mut(j).axpy(u.conj(), &src, linalg::ONE);
            }
        }
        out
    }

    /// Applies `U` in place to a vector laid out as
    /// `outer ⊗ system ⊗ inner ⊗ ladders` and returns the weight that sat on
    /// completed columns.
    pub fn apply_embedded(&self, psi: &mut CVector, outer: usize, inner: usize) -> f64 {
        let d = self.system_dim();
        let q = self.dim() / d;
        assert_eq!(psi.len(), outer * d * inner * q, "vector does not match the layout");
        let mut x = CVector::zeros(self.dim());
        let mut y = CVector::zeros(self.dim());
        let mut mass = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let at = |s: usize, k: usize| ((o * d + s) * inner + i) * q + k;
                let mut any = false;
                for s in 0..d {
                    for k in 0..q {
                        x[s * q + k] = psi[at(s, k)];
                        any |= x[s * q + k] != linalg::ZERO;
                    }
                }
                if !any {
                    continue;
                }
                y.fill(linalg::ZERO);
                for (col, entries) in self.columns.iter().enumerate() {
                    let xc = x[col];
                    if xc == linalg::ZERO {
                        continue;
                    }
                    if !self.ideal[col] {
                        mass += xc.norm_sqr();
                    }
                    for &(row, u) in entries {
                        y[row] += u * xc;
                    }
                }
                for s in 0..d {
                    for k in 0..q {
                        psi[at(s, k)] = y[s * q + k];
                    }
                }
            }
        }
        mass
    }

    /// Probability of shift `c` on ladder `l` when the system is diagonal
    /// with the given weights: `Σ_{s,c′} p_s |V_{c′s}|² [m_l(s,c′) = c]`.
    pub fn shift_distribution(&self, l: usize, weights: &[f64]) -> Vec<(i64, f64)> {
        let mut acc: HashMap<i64, f64> = HashMap::new();
        for (s, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (&cp, m) in &self.shifts[s] {
                *acc.entry(m[l]).or_default() += w * self.v[(cp, s)].norm_sqr();
            }
        }
        let mut out: Vec<(i64, f64)> = acc.into_iter().filter(|&(_, p)| p > 0.0).collect();
        out.sort_by_key(|e| e.0);
        out
    }

    fn check_inputs(&self, sys: &DensityOperator, res: &DensityOperator) -> Result<()> {
        let sys_e = composite_energies(&self.basis, &self.system);
        if **sys.basis() != *self.basis || sys.energies() != sys_e {
            return Err(Error::Argument("system state does not match the unitary's system".into()));
        }
        if res.dims() != self.ladder_dims || **res.basis() != *self.basis {
            return Err(Error::Argument(format!(
                "resource has dimensions {:?}, ladders need {:?}",
                res.dims(),
                self.ladder_dims
            )));
        }
        Ok(())
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for l in (0..dims.len().saturating_sub(1)).rev() {
        s[l] = s[l + 1] * dims[l + 1];
    }
    s
}

fn block_residual(block: &[usize], columns: &[Column]) -> f64 {
    let mut r: f64 = 0.0;
    for (a, &i) in block.iter().enumerate() {
        for &j in &block[a..] {
            let mut g = linalg::ZERO;
            let (ci, cj) = (&columns[i], &columns[j]);
            let (mut p, mut q) = (0, 0);
            while p < ci.len() && q < cj.len() {
                match ci[p].0.cmp(&cj[q].0) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        g += ci[p].1.conj() * cj[q].1;
                        p += 1;
                        q += 1;
                    }
                }
            }
            let want = if i == j { linalg::ONE } else { linalg::ZERO };
            r = r.max((g - want).norm());
        }
    }
    r
}

/// Result of one use of the resource.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub system: DensityOperator,
    pub resource: DensityOperator,
    /// Trace distance of the system output from `V ρ V†`.
    pub error_to_target: f64,
    /// Input probability on columns supplied by the completion.
    pub boundary_mass: f64,
}

impl StepOutcome {
    pub fn leaked(&self) -> bool {
        self.boundary_mass > LEAKAGE_WARNING
    }
}

/// `Tr_Q[U(ρ⊗η)U†]`, `Tr_S[U(ρ⊗η)U†]` and the distance from `VρV†`.
pub fn apply_with_resource(
    u: &ShiftCompensatedUnitary,
    sys: &DensityOperator,
    res: &DensityOperator,
) -> Result<StepOutcome> {
    u.check_inputs(sys, res)?;
    let joint = linalg::kron(sys.matrix(), res.matrix());
    let boundary_mass: f64 = (0..joint.nrows())
        .filter(|&i| !u.ideal[i])
        .map(|i| joint[(i, i)].re)
        .sum::<f64>()
        .max(0.0);
    let out = u.conjugate(&joint);
    let mut dims = vec![u.system_dim()];
    dims.extend_from_slice(&u.ladder_dims);
    let mut keep_sys = vec![false; dims.len()];
    keep_sys[0] = true;
    let keep_res: Vec<bool> = keep_sys.iter().map(|k| !k).collect();
    let sys_m = partial_trace_matrix(&out, &dims, &keep_sys);
    let res_m = if u.ladder_dims.is_empty() {
        res.matrix().clone()
    } else {
        partial_trace_matrix(&out, &dims, &keep_res)
    };
    let target = &u.v * sys.matrix() * u.v.adjoint();
    let error_to_target = matrix_trace_distance(&sys_m, &target);
    Ok(StepOutcome {
        system: DensityOperator::from_trusted(sys_m, u.basis.clone(), u.system.clone()),
        resource: DensityOperator::from_trusted(res_m, res.basis().clone(), res.subsystems().to_vec()),
        error_to_target,
        boundary_mass,
    })
}

/// A sequence of uses threading one resource.
#[derive(Debug, Clone)]
pub struct ReuseOutcome {
    pub outputs: Vec<DensityOperator>,
    pub resource: DensityOperator,
    pub errors: Vec<f64>,
    pub boundary_mass: Vec<f64>,
    /// Mean resource energy after each step.
    pub resource_energy: Vec<f64>,
}

impl ReuseOutcome {
    pub fn leaked(&self) -> bool {
        self.boundary_mass.iter().any(|&m| m > LEAKAGE_WARNING)
    }
}

pub fn reuse_sequence(
    u: &ShiftCompensatedUnitary,
    sys_list: &[DensityOperator],
    res: &DensityOperator,
) -> Result<ReuseOutcome> {
    if sys_list.is_empty() {
        return Err(Error::Argument("reuse needs at least one input".into()));
    }
    let mut resource = res.clone();
    let mut out = ReuseOutcome {
        outputs: Vec::with_capacity(sys_list.len()),
        resource: res.clone(),
        errors: Vec::new(),
        boundary_mass: Vec::new(),
        resource_energy: Vec::new(),
    };
    for sys in sys_list {
        let step = apply_with_resource(u, sys, &resource)?;
        out.errors.push(step.error_to_target);
        out.boundary_mass.push(step.boundary_mass);
        out.resource_energy.push(step.resource.mean_energy());
        out.outputs.push(step.system);
        resource = step.resource;
    }
    out.resource = resource;
    Ok(out)
}

/// `Σ_{s,c′} p_s |V_{c′s}|² S^m ρ_Q S^{m†}`: the resource after one use on a
/// diagonal system input, as a mixture of shifted copies. Shifts past the
/// truncation drop the corresponding weight.
pub fn predicted_resource_marginal(
    u: &ShiftCompensatedUnitary,
    weights: &[f64],
    res: &DensityOperator,
) -> Result<CMatrix> {
    if weights.len() != u.system_dim() || res.dims() != u.ladder_dims {
        return Err(Error::Argument("weights or resource do not match the unitary".into()));
    }
    let st = strides(&u.ladder_dims);
    let q = res.dim();
    let r = res.matrix();
    let mut out = CMatrix::zeros(q, q);
    for (s, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (&cp, m) in &u.shifts[s] {
            let p = w * u.v[(cp, s)].norm_sqr();
            let moved: Vec<Option<usize>> = (0..q)
                .map(|k| {
                    let mut t = 0usize;
                    for ((&sl, &nl), &ml) in st.iter().zip(&u.ladder_dims).zip(m) {
                        let x = ((k / sl) % nl) as i64 + ml;
                        if x < 0 || x >= nl as i64 {
                            return None;
                        }
                        t += x as usize * sl;
                    }
                    Some(t)
                })
                .collect();
            for b in 0..q {
                let Some(tb) = moved[b] else { continue };
                for a in 0..q {
                    if let Some(ta) = moved[a] {
                        out[(ta, tb)] += r[(a, b)] * p;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Probe inputs for implementation error: energy eigenstates, plus the plan
/// state when the unitary came from a plan.
pub fn probe_inputs(u: &ShiftCompensatedUnitary) -> Result<Vec<DensityOperator>> {
    let d = u.system_dim();
    let mut out = (0..d)
        .map(|i| DensityOperator::basis_state(i, u.basis.clone(), u.system.clone()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(plan) = &u.plan {
        out.push(plan.classical_state()?.to_state(u.system.clone())?);
    }
    Ok(out)
}

/// Largest single-use error over [`probe_inputs`] with a fresh resource.
pub fn implementation_error(u: &ShiftCompensatedUnitary, res: &DensityOperator) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in probe_inputs(u)? {
        worst = worst.max(apply_with_resource(u, &p, res)?.error_to_target);
    }
    Ok(worst)
}

/// A qubit with gap `ω = 1` and one ladder with the same spacing.
pub fn hadamard_setup(truncation: usize) -> Result<ShiftCompensatedUnitary> {
    let basis = Arc::new(FrequencyBasis::single("w", 1.0)?);
    let gap = EnergyVector::from_ints(&[1]);
    let h = HamiltonianSpec::from_energies(basis.clone(), vec![EnergyVector::zero(1), gap.clone()])?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let v = CMatrix::from_row_slice(2, 2, &[s, s, s, -s].map(|x| Complex64::new(x, 0.0)));
    let ladders = IntegerBasis::new(vec![gap]).expect("single nonzero element");
    ShiftCompensatedUnitary::new(&v, basis, vec![Subsystem::new("S", h)], ladders, vec![truncation + 1])
}

/// Summary of a Hadamard run: probe errors at a fresh resource and the
/// per-step errors of reusing it on `|0⟩` `ν` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardReport {
    #[serde(rename = "L")]
    pub width: usize,
    #[serde(rename = "M")]
    pub offset: usize,
    pub nu: usize,
    pub truncation: usize,
    pub unitarity_residual: f64,
    pub energy_residual: f64,
    pub probe_error: f64,
    pub step_errors: Vec<f64>,
    pub boundary_mass: Vec<f64>,
    pub resource_energy: Vec<f64>,
    /// `(level, probability)` of the final resource, nonzero entries only.
    pub resource_histogram: Vec<(usize, f64)>,
    pub leakage_warning: bool,
}

pub fn hadamard_demo(width: usize, offset: usize, nu: usize) -> Result<HadamardReport> {
    if nu == 0 {
        return Err(Error::Argument("nu must be at least 1".into()));
    }
    let truncation = default_truncation(width, offset, nu, 1);
    let u = hadamard_setup(truncation)?;
    let res = make_resource(width, offset, &EnergyVector::from_ints(&[1]), truncation, u.basis())?;
    let e = u.joint_energies();
    let energy_residual = crate::channels::check_energy_conserving(&u.to_dense(), &e, &e)?;
    let probe_error = implementation_error(&u, &res)?;
    let zero = DensityOperator::basis_state(0, u.basis.clone(), u.system.clone())?;
    let seq = reuse_sequence(&u, &vec![zero; nu], &res)?;
    let resource_histogram = seq
        .resource
        .populations()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 1e-15)
        .map(|(k, p)| (k, *p))
        .collect();
    Ok(HadamardReport {
        width,
        offset,
        nu,
        truncation,
        unitarity_residual: u.residual(),
        energy_residual,
        probe_error,
        leakage_warning: seq.leaked(),
        step_errors: seq.errors,
        boundary_mass: seq.boundary_mass,
        resource_energy: seq.resource_energy,
        resource_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::check_energy_conserving;
    use crate::classical::{build_classical_target, WindowPolicy, DEFAULT_SEARCH_RADIUS};
    use crate::qstate::{entropy, partial_trace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> EnergyVector {
        EnergyVector::from_ints(&[1])
    }

    #[test]
    fn resource_states() {
        let b = Arc::new(FrequencyBasis::single("w", 1.0).unwrap());
        let r = make_resource(1, 3, &unit(), 5, &b).unwrap();
        assert_eq!(r.populations()[3], 1.0);
        assert!(linalg::is_diagonal(r.matrix()));
        let r = make_resource(2, 0, &unit(), 3, &b).unwrap();
        assert!((r.matrix()[(0, 1)].re - 0.5).abs() < 1e-15);
        for (l, m) in [(1, 0), (4, 2), (16, 5)] {
            let r = make_resource(l, m, &unit(), l + m + 1, &b).unwrap();
            assert!(entropy(&r).abs() < 1e-9);
        }
        assert!(make_resource(4, 3, &unit(), 6, &b).is_err());
        assert!(make_resource(0, 3, &unit(), 6, &b).is_err());
    }

    #[test]
    fn identity_rotation_is_identity() {
        let b = Arc::new(FrequencyBasis::single("w", 1.0).unwrap());
        let h = HamiltonianSpec::from_energies(b.clone(), vec![EnergyVector::zero(1), unit()]).unwrap();
        let lad = IntegerBasis::new(vec![unit()]).unwrap();
        let u = ShiftCompensatedUnitary::new(&CMatrix::identity(2, 2), b, vec![Subsystem::new("S", h)], lad, vec![6])
            .unwrap();
        assert_eq!(u.to_dense(), CMatrix::identity(12, 12));
        assert_eq!(u.completed_columns(), 0);
    }

    #[test]
    fn hadamard_matches_closed_form_inside_the_ladder() {
        let t = 9;
        let u = hadamard_setup(t).unwrap();
        let dense = u.to_dense();
        assert!(linalg::unitarity_residual(&dense) < 1e-12);
        let e = u.joint_energies();
        assert!(check_energy_conserving(&dense, &e, &e).unwrap() < 1e-12);
        let n = t + 1;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // (1/√2)(|0⟩⟨0| − |1⟩⟨1|)⊗I + (1/√2)|0⟩⟨1|⊗S + (1/√2)|1⟩⟨0|⊗S†
        for k in 1..t {
            let c0 = k;
            let c1 = n + k;
            assert!((dense[(k, c0)].re - s).abs() < 1e-14);
            assert!((dense[(n + k - 1, c0)].re - s).abs() < 1e-14);
            assert!((dense[(k + 1, c1)].re - s).abs() < 1e-14);
            assert!((dense[(n + k, c1)].re + s).abs() < 1e-14);
        }
        // |0⟩|0⟩ and |1⟩|T⟩ are the only boundary columns
        assert_eq!(u.completed_columns(), 2);
    }

    #[test]
    fn random_rotations_conserve_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Arc::new(FrequencyBasis::from_pairs(&[("a", 1.0), ("b", 2f64.sqrt())]).unwrap());
        let h = HamiltonianSpec::from_energies(
            b.clone(),
            vec![
                EnergyVector::zero(2),
                EnergyVector::from_ints(&[1, 0]),
                EnergyVector::from_ints(&[0, 1]),
            ],
        )
        .unwrap();
        let lad = IntegerBasis::new(vec![EnergyVector::from_ints(&[1, 0]), EnergyVector::from_ints(&[0, 1])]).unwrap();
        for _ in 0..5 {
            let v = linalg::haar_unitary(3, &mut rng);
            let u = ShiftCompensatedUnitary::new(&v, b.clone(), vec![Subsystem::new("S", h.clone())], lad.clone(), vec![5, 4])
                .unwrap();
            let dense = u.to_dense();
            assert!(linalg::unitarity_residual(&dense) < 1e-9);
            let e = u.joint_energies();
            assert!(check_energy_conserving(&dense, &e, &e).unwrap() < 1e-9);
        }
    }

    #[test]
    fn non_resonant_rotation_is_rejected() {
        let b = Arc::new(FrequencyBasis::from_pairs(&[("a", 1.0), ("b", 2f64.sqrt())]).unwrap());
        let h = HamiltonianSpec::from_energies(b.clone(), vec![EnergyVector::zero(2), EnergyVector::from_ints(&[0, 1])])
            .unwrap();
        let lad = IntegerBasis::new(vec![EnergyVector::from_ints(&[1, 0])]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = CMatrix::from_row_slice(2, 2, &[s, s, s, -s].map(|x| Complex64::new(x, 0.0)));
        assert!(matches!(
            ShiftCompensatedUnitary::new(&v, b, vec![Subsystem::new("S", h)], lad, vec![4]),
            Err(Error::ModeCondition)
        ));
    }

    fn hadamard_error(width: usize, offset: usize) -> f64 {
        let t = default_truncation(width, offset, 1, 1);
        let u = hadamard_setup(t).unwrap();
        let res = make_resource(width, offset, &unit(), t, u.basis()).unwrap();
        implementation_error(&u, &res).unwrap()
    }

    #[test]
    fn error_decreases_with_width() {
        let errs: Vec<f64> = [8, 32, 128].iter().map(|&l| hadamard_error(l, 4)).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        // coherence ⟨η|S|η⟩ = (L−1)/L, so the error is 1/(2L)
        for (e, l) in errs.iter().zip([8.0, 32.0, 128.0]) {
            assert!((e - 0.5 / l).abs() < 1e-10, "{e} at L = {l}");
        }
        let mut prev = 1.0;
        for l in 1..40 {
            let e = hadamard_error(l, 2);
            assert!(e <= prev + 1e-10);
            prev = e;
        }
    }

    #[test]
    fn incoherent_resource_broadcasts_nothing() {
        let t = 6;
        let u = hadamard_setup(t).unwrap();
        let res = make_resource(1, 3, &unit(), t, u.basis()).unwrap();
        let zero = DensityOperator::basis_state(0, u.basis().clone(), u.system().to_vec()).unwrap();
        let out = apply_with_resource(&u, &zero, &res).unwrap();
        assert!(linalg::is_diagonal(out.system.matrix()));
        assert!((out.error_to_target - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reuse_keeps_quality_and_is_repeatable() {
        let rep = hadamard_demo(128, 40, 20).unwrap();
        assert!(rep.energy_residual < 1e-9);
        assert!(!rep.leakage_warning);
        let first = rep.step_errors[0];
        for e in &rep.step_errors {
            assert!(*e <= 2.0 * first);
        }
        // the walk from |0⟩ moves the ladder down half a level per step
        let e0 = 40.0 + 127.0 / 2.0;
        for (n, e) in rep.resource_energy.iter().enumerate() {
            assert!((e - (e0 - 0.5 * (n + 1) as f64)).abs() < 1e-9);
        }

        let t = rep.truncation;
        let u = hadamard_setup(t).unwrap();
        let res = make_resource(16, 10, &unit(), t, u.basis()).unwrap();
        let zero = DensityOperator::basis_state(0, u.basis().clone(), u.system().to_vec()).unwrap();
        let seq = reuse_sequence(&u, &vec![zero.clone(); 4], &res).unwrap();
        let single = apply_with_resource(&u, &zero, &res).unwrap();
        assert_eq!(seq.errors[0], single.error_to_target);
        // step k's error equals a fresh use of the resource handed to it
        let mut r = res.clone();
        for k in 0..4 {
            let step = apply_with_resource(&u, &zero, &r).unwrap();
            assert!((step.error_to_target - seq.errors[k]).abs() < 1e-10);
            r = step.resource;
        }
    }

    #[test]
    fn marginal_after_rotation_from_plan() {
        let b = Arc::new(FrequencyBasis::single("w", 1.0).unwrap());
        let h = HamiltonianSpec::from_energies(b.clone(), vec![EnergyVector::zero(1), unit()]).unwrap();
        let s = 0.3f64.sqrt();
        let c = 0.7f64.sqrt();
        let psi0 = [s, c];
        let psi1 = [c, -s];
        let m = CMatrix::from_fn(2, 2, |i, j| Complex64::new(0.8 * psi0[i] * psi0[j] + 0.2 * psi1[i] * psi1[j], 0.0));
        let rho_p = DensityOperator::single(m, "S", h).unwrap();
        let lad = IntegerBasis::new(vec![unit()]).unwrap();
        let (plan, cl) =
            build_classical_target(&rho_p, 1, &lad, WindowPolicy::Relaxed, DEFAULT_SEARCH_RADIUS).unwrap();
        let t = 30;
        let u = ShiftCompensatedUnitary::from_plan(&plan, vec![t + 1]).unwrap();
        let res = make_resource(12, 8, &unit(), t, &b).unwrap();
        let sys = cl.to_state(u.system().to_vec()).unwrap();
        let out = apply_with_resource(&u, &sys, &res).unwrap();
        let predicted = predicted_resource_marginal(&u, cl.probs(), &res).unwrap();
        assert!(linalg::max_abs(&(out.resource.matrix() - &predicted)) < 1e-10);
        // plan-based and unitary-based walks agree
        let weights: Vec<f64> = plan.entries.iter().map(|e| cl.probs()[e.target]).collect();
        let a = plan.shift_distribution(0, &weights);
        let bb = u.shift_distribution(0, cl.probs());
        assert_eq!(a.len(), bb.len());
        for (x, y) in a.iter().zip(&bb) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-14);
        }
        let joint = crate::qstate::tensor(&sys, &res).unwrap();
        let back = partial_trace(&joint, &sys.labels()).unwrap();
        assert!(linalg::max_abs(&(back.matrix() - sys.matrix())) < 1e-14);
    }
}
