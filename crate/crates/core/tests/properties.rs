//! Invariants checked on random states, channels and classical pairs.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thermoops::channels::{check_energy_conserving, pinching, Channel, ThermalOperation};
use thermoops::classical::{gibbs_stochastic_feasible, stochastic_residual, thermomajorizes, ClassicalState};
use thermoops::modes::coherent_modes;
use thermoops::qstate::io::{state_from_str, state_to_string};
use thermoops::qstate::linalg;
use thermoops::qstate::{
    entropy, free_energy, gibbs_state_of, partial_trace, relative_entropy, tensor, trace_distance, DensityOperator,
    EnergyVector, FrequencyBasis, HamiltonianSpec, Subsystem,
};

fn basis() -> Arc<FrequencyBasis> {
    Arc::new(FrequencyBasis::single("w", 1.0).unwrap())
}

fn hamiltonian(rng: &mut ChaCha8Rng, dim: usize) -> HamiltonianSpec {
    let mut levels: Vec<i64> = (0..dim).map(|_| rng.random_range(0..4)).collect();
    levels.sort();
    HamiltonianSpec::from_energies(basis(), levels.iter().map(|&e| EnergyVector::from_ints(&[e])).collect()).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, label: &str, dim: usize) -> DensityOperator {
    let h = hamiltonian(rng, dim);
    DensityOperator::single(linalg::random_density_matrix(dim, rng), label, h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partial_trace_of_product(seed in any::<u64>(), da in 1usize..=4, db in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_state(&mut rng, "A", da);
        let b = random_state(&mut rng, "B", db);
        let ab = tensor(&a, &b).unwrap();
        let back_a = partial_trace(&ab, &["A"]).unwrap();
        let back_b = partial_trace(&ab, &["B"]).unwrap();
        prop_assert!(linalg::max_abs(&(back_a.matrix() - a.matrix())) < 1e-12);
        prop_assert!(linalg::max_abs(&(back_b.matrix() - b.matrix())) < 1e-12);
        prop_assert!((entropy(&ab) - entropy(&a) - entropy(&b)).abs() < 1e-9);
    }

    #[test]
    fn trace_distance_is_a_bounded_metric(seed in any::<u64>(), d in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_state(&mut rng, "S", d);
        let b = DensityOperator::new(linalg::random_density_matrix(d, &mut rng), a.basis().clone(), a.subsystems().to_vec()).unwrap();
        let c = DensityOperator::new(linalg::random_density_matrix(d, &mut rng), a.basis().clone(), a.subsystems().to_vec()).unwrap();
        let ab = trace_distance(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - trace_distance(&b, &a)).abs() < 1e-12);
        prop_assert!(ab <= trace_distance(&a, &c) + trace_distance(&c, &b) + 1e-12);
        prop_assert!(trace_distance(&a, &a) < 1e-12);
    }

    #[test]
    fn relative_entropy_to_gibbs(seed in any::<u64>(), d in 1usize..=5, beta in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_state(&mut rng, "S", d);
        let tau = gibbs_state_of(rho.basis().clone(), rho.subsystems().to_vec(), beta).unwrap();
        let dre = relative_entropy(&rho, &tau);
        prop_assert!(dre >= -1e-12);
        prop_assert!((free_energy(&rho, beta) - free_energy(&tau, beta) - dre / beta).abs() < 1e-10);
    }

    #[test]
    fn pinching_is_idempotent_and_lowers_free_energy(seed in any::<u64>(), d in 1usize..=5, beta in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_state(&mut rng, "S", d);
        let p = pinching(&rho);
        prop_assert!(linalg::max_abs(&(pinching(&p).matrix() - p.matrix())) < 1e-15);
        prop_assert!(free_energy(&p, beta) <= free_energy(&rho, beta) + 1e-12);
        prop_assert!(coherent_modes(&p, 1e-10).iter().all(|m| m.is_zero()));
        prop_assert!((p.mean_energy() - rho.mean_energy()).abs() < 1e-12);
    }

    #[test]
    fn thermal_operations_preserve_gibbs_and_energy(seed in any::<u64>(), ds in 1usize..=4, de in 1usize..=4, beta in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let system = vec![Subsystem::new("S", hamiltonian(&mut rng, ds))];
        let env = hamiltonian(&mut rng, de);
        let op = ThermalOperation::random(basis(), system.clone(), env, beta, &mut rng).unwrap();
        prop_assert!(op.residual() <= 1e-9);
        let tau = gibbs_state_of(basis(), system.clone(), beta).unwrap();
        prop_assert!(trace_distance(&op.apply(&tau).unwrap(), &tau) < 1e-10);
        let rho = DensityOperator::new(linalg::random_density_matrix(ds, &mut rng), basis(), system).unwrap();
        let out = op.apply(&rho).unwrap();
        prop_assert!((out.matrix().trace().re - 1.0).abs() < 1e-10);
        prop_assert!(out.eigenvalues().iter().all(|&l| l > -1e-9));
        prop_assert!(coherent_modes(&out, 1e-9).is_subset(&coherent_modes(&rho, 1e-12)));
        let e: Vec<f64> = {
            let mut all = vec![Subsystem::new("S", rho.subsystems()[0].hamiltonian.clone())];
            all.push(Subsystem::new("E", op.env().clone()));
            gibbs_state_of(basis(), all, 1.0).unwrap().numeric_energies()
        };
        prop_assert!(check_energy_conserving(op.unitary(), &e, &e).unwrap() <= 1e-12);
    }

    #[test]
    fn state_json_round_trip(seed in any::<u64>(), d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_state(&mut rng, "S", d);
        let back = state_from_str(&state_to_string(&rho).unwrap()).unwrap();
        prop_assert_eq!(back.matrix(), rho.matrix());
        prop_assert_eq!(back.subsystems(), rho.subsystems());
    }

    #[test]
    fn lp_solutions_are_gibbs_stochastic(seed in any::<u64>(), d in 2usize..=5, beta in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels: Vec<i64> = (0..d).map(|_| rng.random_range(0..4)).collect();
        levels.sort();
        let energies: Vec<EnergyVector> = levels.iter().map(|&e| EnergyVector::from_ints(&[e])).collect();
        let probs = |rng: &mut ChaCha8Rng| {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = x.iter().sum();
            x.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = ClassicalState::new(probs(&mut rng), energies.clone(), basis()).unwrap();
        let q = ClassicalState::new(probs(&mut rng), energies, basis()).unwrap();
        let g = p.gibbs_weights(beta).unwrap();
        match gibbs_stochastic_feasible(&p, &q, beta).unwrap() {
            Some(t) => {
                prop_assert!(thermomajorizes(&p, &q, beta).unwrap());
                prop_assert!(stochastic_residual(&t, &g, p.probs(), q.probs()) <= 1e-8);
                prop_assert!(t.iter().all(|&x| x >= 0.0));
            }
            None => prop_assert!(!thermomajorizes(&p, &q, beta).unwrap()),
        }
        // every state can reach the Gibbs state
        let tau = ClassicalState::gibbs(p.energies().to_vec(), basis(), beta).unwrap();
        prop_assert!(gibbs_stochastic_feasible(&p, &tau, beta).unwrap().is_some());
    }
}
