mod common;

use common::{random_game, random_stable_policy, Gen};
use dsg_core::diagnostics::{finite_difference_gradient, gradient_mismatch};
use dsg_core::game::{gauge_transform, per_step_cost, raw_cost};
use dsg_core::gradient::{discounted_covariance, dual_cost, exact_gradient, learner_cost, policy_cost};
use dsg_core::linalg::min_eigenvalue;
use dsg_core::riccati::value_matrix;
use dsg_core::{LiftedVector, Policy, Population};
use nalgebra::DVector;
use proptest::prelude::*;

fn population() -> impl Strategy<Value = Population> {
    prop_oneof![Just(Population::Finite(2)), Just(Population::Finite(10)), Just(Population::Infinite)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gauge_transform_round_trips(seed in any::<u64>(), n in 1usize..12, d in 1usize..4) {
        let mut g = Gen::new(seed);
        let states: Vec<DVector<f64>> = (0..n).map(|_| g.vector(d) * 5.0).collect();
        let actions: Vec<DVector<f64>> = (0..n).map(|_| g.vector(d)).collect();
        let mut delta_sum = DVector::zeros(d);
        for i in 0..n {
            let (x, u) = gauge_transform(&states, &actions, i).unwrap();
            prop_assert!((x.reconstruct() - &states[i]).amax() < 1e-12);
            prop_assert!((u.reconstruct() - &actions[i]).amax() < 1e-12);
            let back = LiftedVector::from_stacked(&x.stacked());
            prop_assert_eq!(&back, &x);
            delta_sum += &x.delta;
        }
        prop_assert!(delta_sum.amax() < 1e-10);
    }

    #[test]
    fn lifted_cost_equals_raw_cost(seed in any::<u64>(), n in prop::sample::select(vec![1usize, 2, 5, 10])) {
        let mut g = Gen::new(seed);
        let spec = random_game(&mut g, Population::Finite(n));
        let m = spec.lift().unwrap();
        let states: Vec<DVector<f64>> = (0..n).map(|_| g.vector(spec.d_x) * 3.0).collect();
        let actions: Vec<DVector<f64>> = (0..n).map(|_| g.vector(spec.d_u) * 3.0).collect();
        for i in 0..n {
            let (x, u) = gauge_transform(&states, &actions, i).unwrap();
            let lifted = per_step_cost(&x, &u, &m);
            let raw = raw_cost(&spec, &states, &actions, i);
            prop_assert!((lifted - raw).abs() <= 1e-10 * (1.0 + raw.abs()), "{} vs {}", lifted, raw);
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences(seed in any::<u64>(), n in population()) {
        let mut g = Gen::new(seed);
        let m = random_game(&mut g, n).lift().unwrap();
        let p = random_stable_policy(&mut g, &m, 0.5);
        let exact = exact_gradient(&p, &m).unwrap();
        let fd = finite_difference_gradient(&p, &m, 1e-5).unwrap();
        prop_assert!(gradient_mismatch(&exact, &fd) <= 1e-4, "mismatch {}", gradient_mismatch(&exact, &fd));
    }

    #[test]
    fn value_and_covariance_sides_agree(seed in any::<u64>(), n in population()) {
        let mut g = Gen::new(seed);
        let m = random_game(&mut g, n).lift().unwrap();
        let p = random_stable_policy(&mut g, &m, 0.5);
        let primal = policy_cost(&p, &m).unwrap();
        let dual = dual_cost(&p, &m).unwrap();
        prop_assert!((primal - dual).abs() <= 1e-9 * (1.0 + primal.abs()));

        let sigma = discounted_covariance(&p, &m).unwrap().sigma;
        let acl = p.closed_loop(&m);
        let rhs = &m.sigma_x * (1.0 - m.gamma) + &acl * &sigma * acl.transpose() * m.gamma + &m.sigma_w * m.gamma;
        prop_assert!((&sigma - rhs).amax() <= 1e-10 * (1.0 + sigma.amax()));
        prop_assert!(min_eigenvalue(&(&sigma - &m.sigma_x * (1.0 - m.gamma))) >= -1e-10);
    }

    #[test]
    fn value_grows_with_state_weight(seed in any::<u64>(), n in population()) {
        let mut g = Gen::new(seed);
        let spec = random_game(&mut g, n);
        let m = spec.lift().unwrap();
        let p = random_stable_policy(&mut g, &m, 0.5);
        let mut heavier = spec.clone();
        heavier.q += g.psd(spec.d_x, 0.0);
        let m2 = heavier.lift().unwrap();
        let v1 = value_matrix(&p, &m, 1e-14).unwrap().m;
        let v2 = value_matrix(&p, &m2, 1e-14).unwrap().m;
        if min_eigenvalue(&m.q) >= 0.0 && min_eigenvalue(&m.r) >= 0.0 {
            prop_assert!(min_eigenvalue(&v1) >= -1e-10);
        }
        prop_assert!(min_eigenvalue(&(v2 - v1)) >= -1e-9);
    }

    #[test]
    fn deviation_cost_at_symmetric_profile_is_policy_cost(seed in any::<u64>(), n in population()) {
        let mut g = Gen::new(seed);
        let m = random_game(&mut g, n).lift().unwrap();
        let p = random_stable_policy(&mut g, &m, 0.5);
        let a = learner_cost(&p, &p, &m).unwrap();
        let b = policy_cost(&p, &m).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn policy_flatten_round_trips(seed in any::<u64>(), du in 1usize..4, dx in 1usize..4) {
        let mut g = Gen::new(seed);
        let p = Policy::new(g.matrix(du, dx), g.matrix(du, dx));
        prop_assert_eq!(Policy::from_flat(du, dx, &p.flatten()), p);
    }
}
