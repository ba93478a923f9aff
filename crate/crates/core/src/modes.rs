//! Coherent modes of a state and integer-linearly independent bases.
//!
//! Energies are exact vectors over a frequency basis that is declared
//! linearly independent over the integers, so integer (in)dependence of
//! energies reduces to rational (in)dependence of their coefficient vectors
//! and every decision here is exact.

use std::collections::{BTreeSet, HashMap};

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::qstate::{DensityOperator, EnergyVector, FrequencyBasis};

/// Matrix elements with modulus at or below this count as zero.
pub const DEFAULT_MAG_THRESHOLD: f64 = 1e-10;

/// The set `𝒟(ρ)` of energy differences carrying nonzero coherence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSet {
    #[serde(with = "display_set")]
    modes: BTreeSet<EnergyVector>,
    source_dim: usize,
}

impl ModeSet {
    pub fn new(modes: BTreeSet<EnergyVector>, source_dim: usize) -> Self {
        ModeSet { modes, source_dim }
    }

    pub fn modes(&self) -> &BTreeSet<EnergyVector> {
        &self.modes
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnergyVector> {
        self.modes.iter()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn contains(&self, e: &EnergyVector) -> bool {
        self.modes.contains(e)
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    /// `true` if the only mode is 0.
    pub fn is_incoherent(&self) -> bool {
        self.modes.iter().all(EnergyVector::is_zero)
    }

    pub fn is_subset(&self, other: &ModeSet) -> bool {
        self.modes.is_subset(&other.modes)
    }

    pub fn to_vec(&self) -> Vec<EnergyVector> {
        self.modes.iter().cloned().collect()
    }
}

/// `𝒟(ρ)`: all `E_i − E_j` with `|⟨E_i|ρ|E_j⟩| > mag_threshold`.
pub fn coherent_modes(rho: &DensityOperator, mag_threshold: f64) -> ModeSet {
    let energies = rho.energies();
    // Distinct energies are few; collect index pairs first and subtract once.
    let mut ids: HashMap<&EnergyVector, usize> = HashMap::new();
    let mut distinct: Vec<&EnergyVector> = Vec::new();
    let id_of: Vec<usize> = energies
        .iter()
        .map(|e| {
            *ids.entry(e).or_insert_with(|| {
                distinct.push(e);
                distinct.len() - 1
            })
        })
        .collect();
    let m = rho.matrix();
    let n = rho.dim();
    let mut pairs = BTreeSet::new();
    for j in 0..n {
        for i in 0..n {
            if m[(i, j)].norm() > mag_threshold {
                pairs.insert((id_of[i], id_of[j]));
            }
        }
    }
    let modes = pairs
        .into_iter()
        .map(|(a, b)| distinct[a] - distinct[b])
        .collect();
    ModeSet::new(modes, n)
}

/// A list of energies that is integer-linearly independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerBasis {
    #[serde(with = "display_list")]
    elements: Vec<EnergyVector>,
}

impl IntegerBasis {
    /// Checks independence; returns `None` for a dependent list.
    pub fn new(elements: Vec<EnergyVector>) -> Option<Self> {
        let cols: Vec<&EnergyVector> = elements.iter().collect();
        (rank(&cols) == elements.len()).then_some(IntegerBasis { elements })
    }

    pub fn empty() -> Self {
        IntegerBasis { elements: vec![] }
    }

    pub fn elements(&self) -> &[EnergyVector] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// `Σ coeffs[l] · elements[l]`.
    pub fn combine(&self, coeffs: &[BigInt], width: usize) -> EnergyVector {
        let mut acc = EnergyVector::zero(width);
        for (c, e) in coeffs.iter().zip(&self.elements) {
            acc = &acc + &e.scale(c);
        }
        acc
    }
}

/// Builds a basis `𝒮` with the same integer span as `t` by sequential
/// insertion. An element already in the span is skipped, an element
/// independent of `𝒮` is appended, and otherwise the primitive integer
/// relation is reduced Euclid-style (`x_i → x_i + p·x_j`) until some
/// coefficient is `±1`, at which point that element is redundant and dropped.
/// Elements are normalised to positive numeric value.
pub fn independent_basis(t: &[EnergyVector], freq: &FrequencyBasis) -> IntegerBasis {
    let mut s: Vec<EnergyVector> = Vec::new();
    for y in t {
        if y.is_zero() {
            continue;
        }
        let cols: Vec<&EnergyVector> = s.iter().collect();
        let Some(c) = solve(&cols, y) else {
            s.push(y.clone());
            continue;
        };
        if c.iter().all(BigRational::is_integer) {
            continue;
        }
        // D·y − Σ D·c_i·s_i = 0, made primitive.
        let d = c.iter().fold(BigInt::one(), |acc, ci| acc.lcm(ci.denom()));
        let dr = BigRational::from_integer(d.clone());
        let mut a: Vec<BigInt> = c.iter().map(|ci| -(ci * &dr).to_integer()).collect();
        a.push(d);
        let g = a.iter().fold(BigInt::zero(), |acc, x| acc.gcd(x));
        for x in &mut a {
            *x /= &g;
        }
        let mut xs = s.clone();
        xs.push(y.clone());
        s = reduce_relation(xs, a);
    }
    for e in &mut s {
        if e.value(freq) < 0.0 {
            *e = -&*e;
        }
    }
    IntegerBasis { elements: s }
}

/// Given `Σ a_i x_i = 0` with `gcd(a) = 1`, returns a list with the same
/// integer span and one element fewer.
fn reduce_relation(mut xs: Vec<EnergyVector>, mut a: Vec<BigInt>) -> Vec<EnergyVector> {
    loop {
        if let Some(k) = a.iter().rposition(|ak| ak.abs().is_one()) {
            xs.remove(k);
            return xs;
        }
        let i = a
            .iter()
            .enumerate()
            .filter(|(_, x)| !x.is_zero())
            .min_by_key(|(_, x)| x.abs())
            .map(|(i, _)| i)
            .expect("relation has a nonzero coefficient");
        let j = a
            .iter()
            .position(|x| !x.is_zero() && !x.is_multiple_of(&a[i]))
            .expect("primitive relation has a coefficient not divisible by the smallest");
        let (p, q) = a[j].div_mod_floor(&a[i]);
        xs[i] = &xs[i] + &xs[j].scale(&p);
        a[j] = q;
    }
}

/// Integer coefficients of `x` over `basis`, if `x` lies in its integer span.
pub fn in_resonant_span(x: &EnergyVector, basis: &IntegerBasis) -> Option<Vec<BigInt>> {
    if basis.is_empty() {
        return x.is_zero().then(Vec::new);
    }
    let cols: Vec<&EnergyVector> = basis.elements.iter().collect();
    let c = solve(&cols, x)?;
    c.iter()
        .map(|ci| ci.is_integer().then(|| ci.to_integer()))
        .collect()
}

/// `𝒞(ρ′) ⊆ 𝒞(ρ)` at the default magnitude threshold.
pub fn condition_holds(rho: &DensityOperator, rho_prime: &DensityOperator) -> bool {
    condition_holds_at(rho, rho_prime, DEFAULT_MAG_THRESHOLD)
}

/// Every coherent mode of `rho_prime` is an integer combination of the
/// coherent modes of `rho`.
pub fn condition_holds_at(rho: &DensityOperator, rho_prime: &DensityOperator, mag_threshold: f64) -> bool {
    if **rho.basis() != **rho_prime.basis() {
        return false;
    }
    let q = independent_basis(&coherent_modes(rho, mag_threshold).to_vec(), rho.basis());
    coherent_modes(rho_prime, mag_threshold)
        .iter()
        .all(|m| in_resonant_span(m, &q).is_some())
}

/// Row-reduces the system `Σ c_k cols[k] = rhs` over the rationals. Returns
/// the solution if the system is consistent and `cols` are independent.
fn solve(cols: &[&EnergyVector], rhs: &EnergyVector) -> Option<Vec<BigRational>> {
    let n = cols.len();
    let mut rows = augmented(cols, Some(rhs));
    let pivots = rref(&mut rows, n);
    if pivots.len() < n {
        return None;
    }
    // Consistency: no row reads 0 = nonzero.
    if rows.iter().skip(n).any(|r| !r[n].is_zero()) {
        return None;
    }
    Some((0..n).map(|k| rows[k][n].clone()).collect())
}

fn rank(cols: &[&EnergyVector]) -> usize {
    let mut rows = augmented(cols, None);
    rref(&mut rows, cols.len()).len()
}

fn augmented(cols: &[&EnergyVector], rhs: Option<&EnergyVector>) -> Vec<Vec<BigRational>> {
    let k = rhs
        .map(EnergyVector::len)
        .or_else(|| cols.first().map(|c| c.len()))
        .unwrap_or(0);
    (0..k)
        .map(|r| {
            cols.iter()
                .map(|c| c.coeffs()[r].clone())
                .chain(rhs.map(|x| x.coeffs()[r].clone()))
                .collect()
        })
        .collect()
}

/// Reduced row echelon form on the first `ncols` columns; returns pivot
/// columns. Pivot rows are moved to the top in pivot order.
fn rref(rows: &mut [Vec<BigRational>], ncols: usize) -> Vec<usize> {
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..ncols {
        let Some(p) = (r..rows.len()).find(|&i| !rows[i][c].is_zero()) else {
            continue;
        };
        rows.swap(r, p);
        let inv = rows[r][c].recip();
        for x in rows[r].iter_mut() {
            *x *= &inv;
        }
        let pivot_row = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i != r && !row[c].is_zero() {
                let f = row[c].clone();
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x -= &f * y;
                }
            }
        }
        pivots.push(c);
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    pivots
}

mod display_set {
    use super::*;

    pub fn serialize<S: Serializer>(set: &BTreeSet<EnergyVector>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(set.iter().map(ToString::to_string))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<EnergyVector>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|x| EnergyVector::parse_display(x).map_err(serde::de::Error::custom))
            .collect()
    }
}

mod display_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[EnergyVector], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(ToString::to_string))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<EnergyVector>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|x| EnergyVector::parse_display(x).map_err(serde::de::Error::custom))
            .collect()
    }
}
