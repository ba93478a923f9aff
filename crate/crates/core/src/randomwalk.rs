//! The resource ladder's drift as a bounded-jump random walk: the root `γ`,
//! the martingale hitting bound and a seeded Monte Carlo estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catcoherence::ShiftCompensatedUnitary;
use crate::classical::{ClassicalState, ClassicalTargetPlan};
use crate::error::{Error, Result};

/// Bisection stops once both `|f(γ)|` and the bracket width are at most this.
pub const GAMMA_TOL: f64 = 1e-12;

/// Jump distribution on the integers with finite support, and the distance
/// `ξ` from the start to the absorbing level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WalkSpecJson", into = "WalkSpecJson")]
pub struct WalkSpec {
    /// `(jump, probability)`, sorted by jump, no duplicates, no zero weights.
    jumps: Vec<(i64, f64)>,
    xi: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WalkSpecJson {
    jumps: Vec<(i64, f64)>,
    xi: u64,
}

impl TryFrom<WalkSpecJson> for WalkSpec {
    type Error = Error;
    fn try_from(j: WalkSpecJson) -> Result<Self> {
        WalkSpec::new(j.jumps, j.xi)
    }
}

impl From<WalkSpec> for WalkSpecJson {
    fn from(w: WalkSpec) -> Self {
        WalkSpecJson { jumps: w.jumps, xi: w.xi }
    }
}

impl WalkSpec {
    /// Merges repeated jumps; probabilities must be nonnegative and sum to 1
    /// within 1e-12.
    pub fn new(jumps: Vec<(i64, f64)>, xi: u64) -> Result<Self> {
        if jumps.iter().any(|&(_, p)| !p.is_finite() || p < 0.0) {
            return Err(Error::Argument("jump probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = jumps.iter().map(|j| j.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("jump probabilities sum to {total}")));
        }
        let mut merged: Vec<(i64, f64)> = Vec::new();
        let mut sorted = jumps;
        sorted.sort_by_key(|j| j.0);
        for (c, p) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += p,
                _ => merged.push((c, p)),
            }
        }
        merged.retain(|j| j.1 > 0.0);
        if xi == 0 {
            return Err(Error::Argument("xi must be at least 1".into()));
        }
        Ok(WalkSpec { jumps: merged, xi })
    }

    pub fn jumps(&self) -> &[(i64, f64)] {
        &self.jumps
    }

    pub fn xi(&self) -> u64 {
        self.xi
    }

    pub fn with_xi(&self, xi: u64) -> Result<Self> {
        Self::new(self.jumps.clone(), xi)
    }

    /// Probability of jump `c`.
    pub fn prob(&self, c: i64) -> f64 {
        self.jumps.iter().find(|j| j.0 == c).map_or(0.0, |j| j.1)
    }

    /// Support bound `l`.
    pub fn max_jump(&self) -> i64 {
        self.jumps.iter().map(|j| j.0.abs()).max().unwrap_or(0)
    }

    /// `Σ_c c·P(c)`.
    pub fn drift(&self) -> f64 {
        self.jumps.iter().map(|&(c, p)| c as f64 * p).sum()
    }
}

/// `f(γ) = Σ_i (Σ_{j≤i} γ^j) p_i − Σ_i (Σ_{j≤i} γ^{−j}) p_{−i}` over `i ≥ 1`.
pub fn gamma_equation(spec: &WalkSpec, gamma: f64) -> f64 {
    let mut f = 0.0;
    for &(c, p) in &spec.jumps {
        let i = c.unsigned_abs() as i32;
        if c > 0 {
            f += p * (1..=i).map(|j| gamma.powi(j)).sum::<f64>();
        } else if c < 0 {
            f -= p * (1..=i).map(|j| gamma.powi(-j)).sum::<f64>();
        }
    }
    f
}

/// Root of [`gamma_equation`] in `(0, 1)` by bisection. A walk without
/// downward jumps has root `0`.
pub fn solve_gamma(spec: &WalkSpec) -> Result<f64> {
    let drift = spec.drift();
    if drift <= 0.0 {
        return Err(Error::NoRoot { drift });
    }
    if spec.jumps.iter().all(|j| j.0 >= 0) {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    loop {
        let mid = 0.5 * (lo + hi);
        let f = gamma_equation(spec, mid);
        if (f.abs() <= GAMMA_TOL && hi - lo <= GAMMA_TOL) || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// The hitting-probability bound and the looser exponential comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingBound {
    pub gamma: f64,
    /// `1/(γ^{−ξ−1} − γ^{−1} + 1)`, clamped to `[0, 1]`.
    pub bound: f64,
    /// `γ^ξ`.
    pub loose: f64,
    /// `f(γ)` at the returned root.
    pub residual: f64,
}

fn bound_at(gamma: f64, xi: u64) -> f64 {
    if gamma <= 0.0 {
        return 0.0;
    }
    let xi = xi as f64;
    let denom = gamma.powf(-xi - 1.0) - 1.0 / gamma + 1.0;
    if !denom.is_finite() {
        return 0.0;
    }
    (1.0 / denom).clamp(0.0, 1.0)
}

/// Upper bound on the probability that the walk ever reaches `−ξ`.
pub fn hitting_bound(spec: &WalkSpec) -> Result<HittingBound> {
    let gamma = solve_gamma(spec)?;
    Ok(HittingBound {
        gamma,
        bound: bound_at(gamma, spec.xi),
        loose: gamma.powf(spec.xi as f64),
        residual: if gamma > 0.0 { gamma_equation(spec, gamma) } else { 0.0 },
    })
}

/// Monte Carlo estimate of the hitting probability within a finite horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub trajectories: u64,
    pub horizon: u64,
    pub seed: u64,
    /// Fraction of trajectories that reached `−ξ`.
    pub estimate: f64,
    pub stderr: f64,
    /// Fraction of trajectories that had not hit when they were stopped.
    pub escaped_mass: f64,
    /// Upper bound on the probability of hitting after a trajectory was
    /// stopped: the mean of the hitting bound from each stopped position.
    pub tail_bound: f64,
}

/// Smallest admissible horizon, `⌈10·ξ/drift⌉`.
pub fn min_horizon(spec: &WalkSpec) -> Result<u64> {
    let drift = spec.drift();
    if drift <= 0.0 {
        return Err(Error::NoRoot { drift });
    }
    Ok((10.0 * spec.xi as f64 / drift).ceil() as u64)
}

/// A comfortable default: ten times the minimum, at least 100 steps.
pub fn default_horizon(spec: &WalkSpec) -> Result<u64> {
    Ok((10 * min_horizon(spec)?).max(100))
}

/// Runs `trajectories` independent walks from 0 for at most `horizon`
/// steps. Trajectory `i` draws from `ChaCha8Rng` seeded with `seed` on
/// stream `i`, so the result does not depend on scheduling. A walk far
/// enough up that its remaining hitting bound is below 1e-16 stops early.
pub fn simulate_hitting(spec: &WalkSpec, trajectories: u64, horizon: u64, seed: u64) -> Result<SimulationResult> {
    if trajectories == 0 {
        return Err(Error::Argument("need at least one trajectory".into()));
    }
    let min = min_horizon(spec)?;
    if horizon < min {
        return Err(Error::Argument(format!("horizon {horizon} is below 10·xi/drift = {min}")));
    }
    let gamma = solve_gamma(spec)?;
    let xi = spec.xi as i64;
    let mut cdf = Vec::with_capacity(spec.jumps.len());
    let mut acc = 0.0;
    for &(c, p) in &spec.jumps {
        acc += p;
        cdf.push((acc, c));
    }
    // Height above the start beyond which the remaining bound is negligible.
    let safe = (1..)
        .map(|h: i64| h)
        .find(|&h| bound_at(gamma, (xi + h) as u64) < 1e-16 || h > 1_000_000)
        .unwrap_or(i64::MAX);

    let outcomes: Vec<(bool, f64)> = (0..trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let mut x: i64 = 0;
            for _ in 0..horizon {
                let u: f64 = rng.random();
                let step = cdf
                    .iter()
                    .find(|(c, _)| u < *c)
                    .map_or(cdf.last().map_or(0, |l| l.1), |s| s.1);
                x += step;
                if x <= -xi {
                    return (true, 0.0);
                }
                if x >= safe {
                    break;
                }
            }
            (false, bound_at(gamma, (x + xi) as u64))
        })
        .collect();

    let n = trajectories as f64;
    let hits = outcomes.iter().filter(|o| o.0).count() as f64;
    let tail: f64 = outcomes.iter().map(|o| o.1).sum::<f64>() / n;
    let estimate = hits / n;
    Ok(SimulationResult {
        trajectories,
        horizon,
        seed,
        estimate,
        stderr: (estimate * (1.0 - estimate) / n).sqrt(),
        escaped_mass: 1.0 - estimate,
        tail_bound: tail,
    })
}

/// The walk on ladder `l` when the plan-basis input has populations `p_cl`:
/// `P(c) = Σ_{j,c′: m_{jc′,l}=c} p_{c[j]}|f_{jc′}|²`.
pub fn walk_from_plan(plan: &ClassicalTargetPlan, p_cl: &ClassicalState, l: usize, xi: u64) -> Result<WalkSpec> {
    if l >= plan.ladders.len() {
        return Err(Error::Argument(format!("ladder {l} out of range")));
    }
    if p_cl.len() != plan.dim() {
        return Err(Error::Argument("classical state does not match the plan".into()));
    }
    let weights: Vec<f64> = plan.entries.iter().map(|e| p_cl.probs()[e.target]).collect();
    let dist = plan.shift_distribution(l, &weights);
    let total: f64 = dist.iter().map(|d| d.1).sum();
    WalkSpec::new(dist.into_iter().map(|(c, p)| (c, p / total)).collect(), xi)
}

/// The walk on ladder `l` read off the unitary itself:
/// `P(c) = Σ_{s,c′} p_s |V_{c′s}|² [m_l(s,c′) = c]`.
pub fn walk_from_unitary(u: &ShiftCompensatedUnitary, p_cl: &ClassicalState, l: usize, xi: u64) -> Result<WalkSpec> {
    if l >= u.ladders().len() {
        return Err(Error::Argument(format!("ladder {l} out of range")));
    }
    if p_cl.len() != u.system_dim() {
        return Err(Error::Argument("classical state does not match the unitary".into()));
    }
    let dist = u.shift_distribution(l, p_cl.probs());
    let total: f64 = dist.iter().map(|d| d.1).sum();
    WalkSpec::new(dist.into_iter().map(|(c, p)| (c, p / total)).collect(), xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn biased(p_up: f64, xi: u64) -> WalkSpec {
        WalkSpec::new(vec![(1, p_up), (-1, 1.0 - p_up)], xi).unwrap()
    }

    #[test]
    fn gamma_for_three_quarters() {
        let s = biased(0.75, 1);
        let g = solve_gamma(&s).unwrap();
        assert!((g - (1.0f64 / 3.0).sqrt()).abs() < 1e-11);
        let b = hitting_bound(&s).unwrap();
        assert!(b.residual.abs() <= GAMMA_TOL);
        let want = 1.0 / (4.0 - 3f64.sqrt());
        assert!((b.bound - want).abs() < 1e-10);
        // gambler's ruin: (p₋/p₊)^ξ = 1/3
        assert!(1.0 / 3.0 <= b.bound);
        assert!(b.bound < b.loose);
    }

    #[test]
    fn deterministic_upward_walk() {
        let s = WalkSpec::new(vec![(1, 1.0)], 3).unwrap();
        assert_eq!(solve_gamma(&s).unwrap(), 0.0);
        assert_eq!(hitting_bound(&s).unwrap().bound, 0.0);
        let sim = simulate_hitting(&s, 1000, 100, 1).unwrap();
        assert_eq!(sim.estimate, 0.0);
    }

    #[test]
    fn non_positive_drift_has_no_root() {
        assert!(matches!(solve_gamma(&biased(0.5, 1)), Err(Error::NoRoot { .. })));
        assert!(matches!(solve_gamma(&biased(0.3, 1)), Err(Error::NoRoot { .. })));
    }

    #[test]
    fn spec_validation_and_json() {
        assert!(WalkSpec::new(vec![(1, 0.5)], 1).is_err());
        assert!(WalkSpec::new(vec![(1, 1.0)], 0).is_err());
        let s: WalkSpec = serde_json::from_str(r#"{"jumps": [[1, 0.75], [-1, 0.25]], "xi": 1}"#).unwrap();
        assert_eq!(s, biased(0.75, 1));
        let merged = WalkSpec::new(vec![(1, 0.5), (1, 0.25), (-1, 0.25), (2, 0.0)], 1).unwrap();
        assert_eq!(merged.jumps(), &[(-1, 0.25), (1, 0.75)]);
        assert!(serde_json::from_str::<WalkSpec>(r#"{"jumps": [[1, 1.0]], "xi": 1, "x": 0}"#).is_err());
    }

    #[test]
    fn bound_decreases_in_xi() {
        let s = biased(0.7, 1);
        let mut last = 1.0;
        for xi in 1..40 {
            let b = hitting_bound(&s.with_xi(xi).unwrap()).unwrap().bound;
            assert!(b < last);
            last = b;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn gamma_is_continuous_near_zero_drift() {
        let mut prev = solve_gamma(&biased(0.5 + 1e-3, 1)).unwrap();
        for k in 2..200 {
            let g = solve_gamma(&biased(0.5 + k as f64 * 1e-3, 1)).unwrap();
            assert!(g < prev && prev - g < 5e-3);
            prev = g;
        }
    }

    #[test]
    fn monte_carlo_matches_gamblers_ruin() {
        let s = biased(0.75, 1);
        let sim = simulate_hitting(&s, 100_000, default_horizon(&s).unwrap(), 7).unwrap();
        assert!((sim.estimate - 1.0 / 3.0).abs() <= 3.0 * sim.stderr);
        assert!(sim.tail_bound < 1e-6);
        let again = simulate_hitting(&s, 100_000, default_horizon(&s).unwrap(), 7).unwrap();
        assert_eq!(sim, again);
    }

    #[test]
    fn horizon_must_cover_drift() {
        let s = biased(0.75, 5);
        assert!(simulate_hitting(&s, 10, 19, 0).is_err());
        assert!(simulate_hitting(&s, 10, 100, 0).is_ok());
    }

    proptest! {
        #[test]
        fn gamma_root_and_monotone(
            up in prop::collection::vec(0.01f64..1.0, 1..=3),
            down in prop::collection::vec(0.01f64..1.0, 1..=3),
            stay in 0.0f64..1.0,
        ) {
            let mut jumps: Vec<(i64, f64)> = up.iter().enumerate().map(|(i, &w)| (i as i64 + 1, w)).collect();
            jumps.extend(down.iter().enumerate().map(|(i, &w)| (-(i as i64) - 1, w * 0.3)));
            jumps.push((0, stay));
            let total: f64 = jumps.iter().map(|j| j.1).sum();
            let jumps: Vec<(i64, f64)> = jumps.into_iter().map(|(c, p)| (c, p / total)).collect();
            let s = WalkSpec::new(jumps, 2).unwrap();
            prop_assume!(s.drift() > 1e-3);
            let g = solve_gamma(&s).unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
            prop_assert!(gamma_equation(&s, g).abs() <= 1e-9);
            let mut last = f64::NEG_INFINITY;
            for k in 1..100 {
                let f = gamma_equation(&s, k as f64 / 100.0);
                prop_assert!(f > last);
                last = f;
            }
            let b = hitting_bound(&s).unwrap();
            prop_assert!(b.bound < b.loose);
        }
    }
}
