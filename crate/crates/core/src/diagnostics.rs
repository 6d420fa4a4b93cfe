//! Named numerical checks run against one game.

use serde::Serialize;

use crate::error::Result;
use crate::game::{LiftedModel, Population};
use crate::gradient::{
    discounted_covariance, dual_cost, evaluate, exact_gradient, learner_cost, npg_step,
    npg_step_size, pl_check, policy_cost, GradientPair, PlReport,
};
use crate::linalg::{min_eigenvalue, sigma_min, spectral_norm};
use crate::riccati::{
    decoupled_infinite, nash_cost, probe_multiplicity, solve_nash, value_matrix, with_population,
    NashSolution, Policy, SolverOptions,
};
use crate::rng::{stream_id, SlotRng};
use crate::sim::{empirical_cost, empirical_covariance, rollout, RolloutConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckOutcome {
    Pass,
    Fail,
    Inapplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: CheckOutcome,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, ok: bool, detail: String) -> Self {
        let outcome = if ok { CheckOutcome::Pass } else { CheckOutcome::Fail };
        CheckResult { name, outcome, detail }
    }

    fn inapplicable(name: &'static str, detail: impl Into<String>) -> Self {
        CheckResult {
            name,
            outcome: CheckOutcome::Inapplicable,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    pub rollouts: usize,
    pub perturbations: usize,
    /// Added to every exact gradient entry before comparison; fault injection only.
    pub corrupt_gradient: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            rollouts: 4000,
            perturbations: 20,
            corrupt_gradient: None,
        }
    }
}

/// Central differences of the learner's deviation cost, imitators held at `policy`.
pub fn finite_difference_gradient(policy: &Policy, m: &LiftedModel, h: f64) -> Result<GradientPair> {
    let (du, dx) = (policy.d_u(), policy.d_x());
    let base = policy.flatten();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let step = h * base[i].abs().max(1.0);
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += step;
        minus[i] -= step;
        let jp = learner_cost(&Policy::from_flat(du, dx, &plus), policy, m)?;
        let jm = learner_cost(&Policy::from_flat(du, dx, &minus), policy, m)?;
        out[i] = (jp - jm) / (2.0 * step);
    }
    let p = Policy::from_flat(du, dx, &out);
    Ok(GradientPair {
        d_theta: p.theta,
        d_theta_bar: p.theta_bar,
    })
}

/// Relative gap used by every gradient comparison.
pub fn gradient_mismatch(a: &GradientPair, b: &GradientPair) -> f64 {
    let diff = (a.concat() - b.concat()).norm();
    diff / a.norm().max(b.norm()).max(1e-12)
}

/// Random policy within `scale` (Frobenius) of `center` that keeps `ρ < 1`.
pub fn stable_perturbation(center: &Policy, m: &LiftedModel, scale: f64, rng: &mut SlotRng, slot: usize) -> Policy {
    let dim = 2 * center.d_u() * center.d_x();
    let mut z = vec![0.0; dim];
    let mut s = scale;
    for attempt in 0..64 {
        rng.normals(slot * 64 + attempt, 0, &mut z);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let delta: Vec<f64> = z.iter().map(|v| v * s / norm).collect();
        let p = center.add(&Policy::from_flat(center.d_u(), center.d_x(), &delta));
        if p.is_stable(m) {
            return p;
        }
        s *= 0.7;
    }
    center.clone()
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub eta: f64,
    /// `1 − ημσ_min(𝐑)/‖𝚺_𝛉*‖`
    pub bound: f64,
    pub max_ratio: f64,
    pub iterations: usize,
    pub holds: bool,
}

/// NPGD with the theorem step from `init`; compares every gap ratio with the bound.
pub fn npg_contraction_run(
    m: &LiftedModel,
    nash: &NashSolution,
    init: &Policy,
    max_iter: usize,
) -> Result<ContractionReport> {
    let j_star = nash_cost(nash, m);
    let sigma_star = discounted_covariance(&nash.policy, m)?;
    let mut eval = evaluate(init, m)?;
    let eta = npg_step_size(m, eval.cost, m.mu());
    let bound = 1.0 - eta * m.mu() * sigma_min(&m.r) / spectral_norm(&sigma_star.sigma);
    let floor = 1e-9 * (1.0 + j_star.abs());
    let mut policy = init.clone();
    let mut max_ratio = f64::NEG_INFINITY;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let gap = eval.cost - j_star;
        if gap.abs() <= floor {
            break;
        }
        policy = npg_step(&policy, &eval.gradient, &eval.covariance, eta)?;
        eval = evaluate(&policy, m)?;
        max_ratio = max_ratio.max((eval.cost - j_star) / gap);
        iterations += 1;
    }
    Ok(ContractionReport {
        eta,
        bound,
        max_ratio,
        iterations,
        holds: max_ratio <= bound + 1e-9,
    })
}

/// Truncation bound `ε(T) = d_x J²/((1−γ)Tμσ²_min(𝐐))`; infinite when `σ_min(𝐐) = 0`.
pub fn truncation_epsilon(m: &LiftedModel, j: f64, horizon: usize) -> f64 {
    let sq = sigma_min(&m.q);
    m.d_x() as f64 * j * j / ((1.0 - m.gamma) * horizon as f64 * m.mu() * sq * sq)
}

/// `ε̄(T) = ε(T)(‖𝐐‖ + ‖𝐑‖‖𝛉‖²)`
pub fn truncation_epsilon_bar(m: &LiftedModel, policy: &Policy, j: f64, horizon: usize) -> f64 {
    let theta = spectral_norm(&policy.block());
    truncation_epsilon(m, j, horizon) * (spectral_norm(&m.q) + spectral_norm(&m.r) * theta * theta)
}

/// Runs every check that applies to the model. `init` seeds the descent checks.
pub fn run_checks(m: &LiftedModel, init: &Policy, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let nash = solve_nash(m, &SolverOptions::default())?;
    let star = &nash.policy;
    let j_star = nash_cost(&nash, m);
    let mut rng = SlotRng::new(opts.seed, stream_id(&[0xd1a6]), 1, 2 * star.d_u() * star.d_x());

    let corrupt = |g: GradientPair| match opts.corrupt_gradient {
        Some(c) => GradientPair {
            d_theta: g.d_theta.add_scalar(c),
            d_theta_bar: g.d_theta_bar.add_scalar(c),
        },
        None => g,
    };

    let g_star = corrupt(exact_gradient(star, m)?);
    let tol = 1e-6 * (1.0 + star.norm());
    out.push(CheckResult::new(
        "nash stationarity",
        g_star.norm() <= tol,
        format!("|grad| = {:e} (tol {tol:e}), {} iterations", g_star.norm(), nash.iterations),
    ));

    let v = value_matrix(star, m, 1e-14)?;
    let (again, _) = crate::riccati::gain_map(&v, m)?;
    let drift = again.sub(star).norm();
    out.push(CheckResult::new(
        "fixed-point consistency",
        drift <= 1e-8 * (1.0 + star.norm()),
        format!("|G(M(theta*)) - theta*| = {drift:e}"),
    ));

    let mut worst_fd: f64 = 0.0;
    let mut worst_dual: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    let mut dominated = true;
    for i in 0..opts.perturbations {
        let p = stable_perturbation(star, m, 0.3, &mut rng, i);
        let exact = corrupt(exact_gradient(&p, m)?);
        let fd = finite_difference_gradient(&p, m, 1e-5)?;
        worst_fd = worst_fd.max(gradient_mismatch(&exact, &fd));
        let j = policy_cost(&p, m)?;
        worst_dual = worst_dual.max((j - dual_cost(&p, m)?).abs() / j.abs().max(1e-300));
        let sigma = discounted_covariance(&p, m)?;
        let acl = p.closed_loop(m);
        let resid = &m.sigma_x * (1.0 - m.gamma) + &m.sigma_w * m.gamma
            + &acl * &sigma.sigma * acl.transpose() * m.gamma
            - &sigma.sigma;
        worst_cov = worst_cov.max(resid.norm());
        dominated &= min_eigenvalue(&(&sigma.sigma - &m.sigma_x * (1.0 - m.gamma))) >= -1e-10;
    }
    out.push(CheckResult::new(
        "gradient finite-difference",
        worst_fd <= 1e-4,
        format!("worst relative error {worst_fd:e} over {} policies", opts.perturbations),
    ));
    out.push(CheckResult::new(
        "cost duality",
        worst_dual <= 1e-8,
        format!("worst relative gap {worst_dual:e}"),
    ));
    out.push(CheckResult::new(
        "covariance identity",
        worst_cov <= 1e-10 && dominated,
        format!("worst residual {worst_cov:e}, dominates first term: {dominated}"),
    ));

    out.push(pl_result(m, &nash, &mut rng, opts.perturbations)?);
    out.push(contraction_result(m, &nash, init)?);
    out.extend(simulation_results(m, &nash, j_star, opts)?);
    out.push(mean_field_result(m)?);

    let multi = probe_multiplicity(m, &SolverOptions::default())?;
    out.push(CheckResult::new(
        "unique fixed point",
        !multi.distinct,
        format!("gain gap between initializations {:e}", multi.gain_gap),
    ));
    Ok(out)
}

fn pl_result(m: &LiftedModel, nash: &NashSolution, rng: &mut SlotRng, count: usize) -> Result<CheckResult> {
    let mut worst: f64 = f64::NEG_INFINITY;
    for i in 0..count {
        let p = stable_perturbation(&nash.policy, m, 0.3, rng, 1000 + i);
        match pl_check(&p, nash, m)? {
            PlReport::Inapplicable { reason } => {
                return Ok(CheckResult::inapplicable("PL inequality", reason))
            }
            PlReport::Evaluated { gap, bound, .. } => worst = worst.max(gap - bound),
        }
    }
    Ok(CheckResult::new(
        "PL inequality",
        worst <= 1e-12,
        format!("max(gap - L1 |grad|^2) = {worst:e}"),
    ))
}

fn contraction_result(m: &LiftedModel, nash: &NashSolution, init: &Policy) -> Result<CheckResult> {
    const NAME: &str = "NPGD contraction";
    if sigma_min(&m.r) < 1e-12 {
        return Ok(CheckResult::inapplicable(NAME, "inapplicable: σ_min(𝐑)=0"));
    }
    if !init.is_stable(m) {
        return Ok(CheckResult::inapplicable(NAME, "initial policy unstable"));
    }
    let r = npg_contraction_run(m, nash, init, 5000)?;
    Ok(CheckResult::new(
        NAME,
        r.holds,
        format!("max ratio {:.6} vs bound {:.6} over {} iterations", r.max_ratio, r.bound, r.iterations),
    ))
}

fn simulation_results(m: &LiftedModel, nash: &NashSolution, j_star: f64, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    if m.population() == Population::Infinite {
        return Ok(vec![
            CheckResult::inapplicable("truncation bound", "simulation needs finite n"),
            CheckResult::inapplicable("simulated cost", "simulation needs finite n"),
        ]);
    }
    let star = &nash.policy;
    let sigma_star = discounted_covariance(star, m)?;
    let mut out = Vec::new();

    let mut ok = true;
    let mut detail = Vec::new();
    for (i, t) in [10usize, 100].into_iter().enumerate() {
        let cfg = RolloutConfig {
            stream: stream_id(&[0x7e, i as u64]),
            ..RolloutConfig::new(t, opts.rollouts, opts.seed)
        };
        let traces = rollout(&m.spec, star, star, &cfg)?;
        let cost = empirical_cost(&traces)?;
        let cov = empirical_covariance(&traces)?;
        let eps = truncation_epsilon(m, j_star, t);
        let eps_bar = truncation_epsilon_bar(m, star, j_star, t);
        let cost_ok = (cost.mean - j_star).abs() <= eps_bar + 3.0 * cost.std_error;
        let cov_ok = spectral_norm(&(&cov.covariance.sigma - &sigma_star.sigma)) <= eps + 3.0 * cov.std_error.norm();
        ok &= cost_ok && cov_ok;
        detail.push(format!("T={t}: |dJ|={:.3e} eps_bar={eps_bar:.3e}", (cost.mean - j_star).abs()));
    }
    out.push(CheckResult::new("truncation bound", ok, detail.join("; ")));

    let cfg = RolloutConfig {
        stream: stream_id(&[0x5c]),
        ..RolloutConfig::new(200, opts.rollouts, opts.seed)
    };
    let traces = rollout(&m.spec, star, star, &cfg)?;
    let cost = empirical_cost(&traces)?;
    let dev = (cost.mean - j_star).abs();
    out.push(CheckResult::new(
        "simulated cost",
        dev <= 3.0 * cost.std_error,
        format!("mean {:.6} vs formula {j_star:.6} (se {:.2e})", cost.mean, cost.std_error),
    ));
    Ok(out)
}

fn mean_field_result(m: &LiftedModel) -> Result<CheckResult> {
    const NAME: &str = "mean-field decoupling";
    let limit = match decoupled_infinite(m) {
        Ok(p) => p,
        Err(e) => return Ok(CheckResult::inapplicable(NAME, e.to_string())),
    };
    let inf = with_population(m, Population::Infinite)?;
    let sol = solve_nash(&inf, &SolverOptions::default())?;
    let gap = sol.policy.sub(&limit).norm();
    Ok(CheckResult::new(
        NAME,
        gap <= 1e-8,
        format!("|coupled(n=inf) - decoupled| = {gap:e}"),
    ))
}
