mod common;

use common::{preset, truncated_cost};
use dsg_core::gradient::{effective_gain, exact_gradient};
use dsg_core::riccati::solve_nash;
use dsg_core::zeroth::{empirical_gradient, train_model_free, ModelFreeOptions, SmoothingConfig};
use dsg_core::{GameSpec, LiftedModel, Method, Policy, Population, SolverOptions};

fn small_game() -> GameSpec {
    GameSpec::scalar(Population::Finite(2), 0.9, 0.8, 0.5, 1.0, 1.0, 0.5, 1.0, 0.0, 0.2, 0.5, 0.2, 0.1)
}

/// Ball average of the exact truncated deviation cost, by polar midpoint quadrature.
fn smoothed_cost(center: &Policy, others: &Policy, m: &LiftedModel, r: f64, horizon: usize) -> f64 {
    let (nr, na) = (60, 120);
    let (mut acc, mut weight) = (0.0, 0.0);
    for i in 0..nr {
        let rho = (i as f64 + 0.5) / nr as f64 * r;
        for j in 0..na {
            let phi = std::f64::consts::TAU * j as f64 / na as f64;
            let p = center.add(&Policy::scalar(rho * phi.cos(), rho * phi.sin()));
            acc += rho * truncated_cost(&effective_gain(&p, others, m.population()), m, horizon);
            weight += rho;
        }
    }
    acc / weight
}

#[test]
fn estimator_is_unbiased_for_the_smoothed_truncated_cost() {
    let spec = small_game();
    let m = spec.lift().unwrap();
    let policy = Policy::scalar(2.0, 2.5);
    let (r, horizon, samples) = (0.3, 5, 100_000);
    let est = empirical_gradient(&policy, &spec, &SmoothingConfig::new(r, samples, horizon), 21, 0, 0).unwrap();
    assert_eq!(est.rejected, 0);

    let scale = 2.0 / (r * r);
    let terms: Vec<[f64; 2]> = est
        .samples
        .iter()
        .map(|s| {
            let c = s.cost_sample.unwrap() * scale;
            [c * s.theta_tilde[(0, 0)], c * s.theta_bar_tilde[(0, 0)]]
        })
        .collect();
    let h = 1e-4;
    for (axis, got) in [est.gradient.d_theta[(0, 0)], est.gradient.d_theta_bar[(0, 0)]].into_iter().enumerate() {
        let mean = terms.iter().map(|t| t[axis]).sum::<f64>() / samples as f64;
        assert!((mean - got).abs() < 1e-9);
        let var = terms.iter().map(|t| (t[axis] - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        let se = (var / samples as f64).sqrt();
        let shift = if axis == 0 { Policy::scalar(h, 0.0) } else { Policy::scalar(0.0, h) };
        let up = smoothed_cost(&policy.add(&shift), &policy, &m, r, horizon);
        let down = smoothed_cost(&policy.sub(&shift), &policy, &m, r, horizon);
        let reference = (up - down) / (2.0 * h);
        assert!((got - reference).abs() <= 3.5 * se, "axis {axis}: {got} vs {reference} (se {se})");
    }
}

#[test]
fn flat_landscape_estimates_zero() {
    let mut spec = small_game();
    for mat in [&mut spec.q, &mut spec.s_x, &mut spec.q_bar, &mut spec.r, &mut spec.s_u, &mut spec.r_bar] {
        mat.fill(0.0);
    }
    let mut smoothing = SmoothingConfig::new(0.1, 500, 10);
    smoothing.guard = None;
    let est = empirical_gradient(&Policy::scalar(0.3, 0.3), &spec, &smoothing, 4, 0, 1).unwrap();
    assert_eq!(est.gradient.norm(), 0.0);
}

#[test]
fn error_shrinks_with_more_perturbations() {
    let (spec, m) = preset("example2");
    let policy = Policy::scalar(0.6, 1.0);
    let exact = exact_gradient(&policy, &m).unwrap();
    let median_error = |samples: usize| {
        let mut errs: Vec<f64> = (0..7)
            .map(|rep| {
                let est = empirical_gradient(&policy, &spec, &SmoothingConfig::new(0.1, samples, 60), rep, 0, 0).unwrap();
                est.gradient.as_policy().sub(&exact.as_policy()).norm()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        errs[3]
    };
    let coarse = median_error(100);
    let fine = median_error(2000);
    assert!(fine < coarse, "{fine} !< {coarse}");
}

#[test]
fn model_free_descent_moves_toward_equilibrium() {
    let (spec, m) = preset("example2");
    let nash = solve_nash(&m, &SolverOptions::default()).unwrap().policy;
    let init = Policy::scalar(1.0, 1.0);
    let opts = ModelFreeOptions {
        method: Method::Gd,
        eta: 0.04,
        iterations: 150,
        smoothing: SmoothingConfig::new(0.09, 100, 30),
        seed: 5,
        random_learner: false,
        baseline_rollouts: Some(20),
    };
    let log = train_model_free(&spec, &init, &opts, Some(&m)).unwrap();
    assert_eq!(log.records.len(), 151);
    let start = init.sub(&nash).norm();
    let end = log.final_policy.sub(&nash).norm();
    assert!(end < start, "{end} !< {start}");
    let again = train_model_free(&spec, &init, &opts, Some(&m)).unwrap();
    assert_eq!(again.final_policy, log.final_policy);
}
