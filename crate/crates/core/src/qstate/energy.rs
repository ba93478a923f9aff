use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A named base frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frequency {
    pub name: String,
    pub value: f64,
}

/// Real frequencies that are declared to be linearly independent over the
/// integers. Energies are exact rational coordinates over this basis, which
/// makes integer-linear (in)dependence decidable without tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Frequency>", into = "Vec<Frequency>")]
pub struct FrequencyBasis {
    frequencies: Vec<Frequency>,
}

impl FrequencyBasis {
    pub fn new(frequencies: Vec<Frequency>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::Argument("frequency basis must be nonempty".into()));
        }
        for f in &frequencies {
            if !f.value.is_finite() || f.value <= 0.0 {
                return Err(Error::Argument(format!(
                    "frequency `{}` must be finite and positive, got {}",
                    f.name, f.value
                )));
            }
        }
        Ok(FrequencyBasis { frequencies })
    }

    /// Convenience constructor for a one-frequency basis.
    pub fn single(name: &str, value: f64) -> Result<Self> {
        Self::new(vec![Frequency {
            name: name.to_string(),
            value,
        }])
    }

    /// Builds a basis from `(name, value)` pairs.
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(name, value)| Frequency {
                    name: name.to_string(),
                    value,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn value(&self, k: usize) -> f64 {
        self.frequencies[k].value
    }

    pub fn frequencies(&self) -> &[Frequency] {
        &self.frequencies
    }
}

impl TryFrom<Vec<Frequency>> for FrequencyBasis {
    type Error = Error;
    fn try_from(v: Vec<Frequency>) -> Result<Self> {
        FrequencyBasis::new(v)
    }
}

impl From<FrequencyBasis> for Vec<Frequency> {
    fn from(b: FrequencyBasis) -> Self {
        b.frequencies
    }
}

/// An exact energy: rational coefficients over a [`FrequencyBasis`].
///
/// Equality, ordering and hashing are on the coefficients only; whether two
/// vectors refer to the same basis is checked by the containers holding them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnergyVector {
    coeffs: Vec<BigRational>,
}

impl EnergyVector {
    pub fn zero(len: usize) -> Self {
        EnergyVector {
            coeffs: vec![BigRational::zero(); len],
        }
    }

    /// The `k`-th base frequency itself.
    pub fn unit(len: usize, k: usize) -> Self {
        let mut v = Self::zero(len);
        v.coeffs[k] = BigRational::one();
        v
    }

    pub fn from_rationals(coeffs: Vec<BigRational>) -> Self {
        EnergyVector { coeffs }
    }

    pub fn from_ints(coeffs: &[i64]) -> Self {
        EnergyVector {
            coeffs: coeffs
                .iter()
                .map(|&c| BigRational::from_integer(BigInt::from(c)))
                .collect(),
        }
    }

    /// Coefficients given as `(numerator, denominator)` pairs.
    pub fn from_ratios(coeffs: &[(i64, i64)]) -> Self {
        EnergyVector {
            coeffs: coeffs
                .iter()
                .map(|&(p, q)| BigRational::new(BigInt::from(p), BigInt::from(q)))
                .collect(),
        }
    }

    pub fn coeffs(&self) -> &[BigRational] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(Zero::is_zero)
    }

    /// Numeric value `Σ coeffs[k] · basis[k]`.
    pub fn value(&self, basis: &FrequencyBasis) -> f64 {
        debug_assert_eq!(self.len(), basis.len());
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| ratio_to_f64(c) * basis.value(k))
            .sum()
    }

    pub fn scale(&self, factor: &BigInt) -> Self {
        let f = BigRational::from_integer(factor.clone());
        EnergyVector {
            coeffs: self.coeffs.iter().map(|c| c * &f).collect(),
        }
    }

    pub fn scale_i64(&self, factor: i64) -> Self {
        self.scale(&BigInt::from(factor))
    }
}

pub(crate) fn ratio_to_f64(r: &BigRational) -> f64 {
    match (r.numer().to_f64(), r.denom().to_f64()) {
        (Some(n), Some(d)) if n.is_finite() && d.is_finite() => n / d,
        _ => r.to_f64().unwrap_or(f64::NAN),
    }
}

impl Add for &EnergyVector {
    type Output = EnergyVector;
    fn add(self, rhs: &EnergyVector) -> EnergyVector {
        assert_eq!(self.len(), rhs.len(), "energy vectors over different bases");
        EnergyVector {
            coeffs: self
                .coeffs
                .iter()
                .zip(&rhs.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl Sub for &EnergyVector {
    type Output = EnergyVector;
    fn sub(self, rhs: &EnergyVector) -> EnergyVector {
        assert_eq!(self.len(), rhs.len(), "energy vectors over different bases");
        EnergyVector {
            coeffs: self
                .coeffs
                .iter()
                .zip(&rhs.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl Neg for &EnergyVector {
    type Output = EnergyVector;
    fn neg(self) -> EnergyVector {
        EnergyVector {
            coeffs: self.coeffs.iter().map(|c| -c).collect(),
        }
    }
}

fn format_ratio(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn parse_ratio(s: &str) -> Result<BigRational> {
    let bad = || Error::Argument(format!("cannot parse rational `{s}`"));
    let s = s.trim();
    match s.split_once('/') {
        Some((p, q)) => {
            let p = BigInt::from_str(p.trim()).map_err(|_| bad())?;
            let q = BigInt::from_str(q.trim()).map_err(|_| bad())?;
            if q.is_zero() {
                return Err(bad());
            }
            Ok(BigRational::new(p, q))
        }
        None => Ok(BigRational::from_integer(
            BigInt::from_str(s).map_err(|_| bad())?,
        )),
    }
}

impl fmt::Display for EnergyVector {
    /// Renders as `[p/q, ...]`; a one-frequency vector renders as its single
    /// coefficient.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coeffs.len() == 1 {
            return write!(f, "{}", format_ratio(&self.coeffs[0]));
        }
        write!(f, "[")?;
        for (i, c) in self.coeffs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}", format_ratio(c))?;
        }
        write!(f, "]")
    }
}

impl EnergyVector {
    /// Coefficients as `"p/q"` strings (integers without a denominator).
    pub fn to_strings(&self) -> Vec<String> {
        self.coeffs.iter().map(format_ratio).collect()
    }

    pub fn parse(parts: &[String]) -> Result<Self> {
        Ok(EnergyVector {
            coeffs: parts
                .iter()
                .map(|s| parse_ratio(s))
                .collect::<Result<_>>()?,
        })
    }

    /// Parses the [`Display`](fmt::Display) form: `"p/q"` or `"[a, b, ...]"`.
    pub fn parse_display(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            Some(inner) => Ok(EnergyVector {
                coeffs: inner.split(',').map(parse_ratio).collect::<Result<_>>()?,
            }),
            None => Ok(EnergyVector {
                coeffs: vec![parse_ratio(t)?],
            }),
        }
    }

    /// `true` if every coefficient is an integer.
    pub fn is_integral(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_integer())
    }
}

impl Serialize for EnergyVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for EnergyVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let parts = Vec::<String>::deserialize(d)?;
        EnergyVector::parse(&parts).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_equality_and_arithmetic() {
        let a = EnergyVector::from_ratios(&[(1, 2), (1, 3)]);
        let b = EnergyVector::from_ratios(&[(2, 4), (2, 6)]);
        assert_eq!(a, b);
        let d = &a - &b;
        assert!(d.is_zero());
        let s = &a + &a;
        assert_eq!(s, EnergyVector::from_ratios(&[(1, 1), (2, 3)]));
    }

    #[test]
    fn numeric_value_over_basis() {
        let basis = FrequencyBasis::from_pairs(&[("one", 1.0), ("sqrt2", 2f64.sqrt())]).unwrap();
        let e = EnergyVector::from_ints(&[1, 2]);
        assert!((e.value(&basis) - (1.0 + 2.0 * 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn string_round_trip() {
        let e = EnergyVector::from_ratios(&[(-3, 4), (5, 1)]);
        let s = e.to_strings();
        assert_eq!(s, vec!["-3/4".to_string(), "5".to_string()]);
        assert_eq!(EnergyVector::parse(&s).unwrap(), e);
        assert!(EnergyVector::parse(&["1/0".to_string()]).is_err());
        for e in [e.clone(), EnergyVector::from_ratios(&[(7, 3)])] {
            assert_eq!(EnergyVector::parse_display(&e.to_string()).unwrap(), e);
        }
    }

    #[test]
    fn rejects_bad_basis() {
        assert!(FrequencyBasis::new(vec![]).is_err());
        assert!(FrequencyBasis::single("w", -1.0).is_err());
        assert!(FrequencyBasis::single("w", f64::NAN).is_err());
    }
}
