//! n-player rollouts under deep-state-sharing linear strategies.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{GameSpec, LiftedVector};
use crate::gradient::CovarianceMatrix;
use crate::linalg::{psd_sqrt, symmetrize};
use crate::riccati::Policy;
use crate::rng::{stream_id, SlotRng};

pub const STATE_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Detail {
    /// Costs and the discounted second moment only.
    Summary,
    /// Also the learner's lifted trajectory.
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    /// Zero-based index of the learning player.
    pub learner: usize,
    pub detail: Detail,
    pub record_all_players: bool,
    /// Separates independent uses of one seed (iterations, perturbations, ...).
    pub stream: u64,
    /// Abort a rollout once any state entry exceeds this magnitude.
    pub guard: Option<f64>,
}

impl RolloutConfig {
    pub fn new(horizon: usize, n_rollouts: usize, seed: u64) -> Self {
        RolloutConfig {
            horizon,
            n_rollouts,
            seed,
            learner: 0,
            detail: Detail::Summary,
            record_all_players: false,
            stream: 0,
            guard: Some(STATE_GUARD),
        }
    }
}

/// Source of initial states and noise for all players at once.
///
/// Buffers are player-major: entries `j·d_x .. (j+1)·d_x` belong to player `j`.
pub trait PrimitiveSampler: Sync {
    fn initial_states(&self, rng: &mut SlotRng, n: usize, out: &mut [f64]);
    /// Noise entering the transition into step `t` (`t ≥ 1`).
    fn noises(&self, rng: &mut SlotRng, t: usize, n: usize, out: &mut [f64]);
}

/// Independent Gaussian primitives with the spec's mean and covariances.
#[derive(Debug, Clone)]
pub struct IidGaussian {
    mean: Vec<f64>,
    init_root: Vec<f64>,
    noise_root: Vec<f64>,
    dim: usize,
}

impl IidGaussian {
    pub fn new(spec: &GameSpec) -> Self {
        IidGaussian {
            mean: spec.init_mean.iter().copied().collect(),
            init_root: row_major(&psd_sqrt(&spec.init_cov)),
            noise_root: row_major(&psd_sqrt(&spec.noise_cov)),
            dim: spec.d_x,
        }
    }

    fn fill(&self, rng: &mut SlotRng, t: usize, n: usize, root: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut z = [0.0f64; 8];
        let mut zv = vec![0.0; if d > 8 { d } else { 0 }];
        for j in 0..n {
            let buf: &mut [f64] = if d <= 8 { &mut z[..d] } else { &mut zv };
            rng.normals(t, j, buf);
            matvec(root, d, d, buf, &mut out[j * d..(j + 1) * d], 1.0, false);
        }
    }
}

impl PrimitiveSampler for IidGaussian {
    fn initial_states(&self, rng: &mut SlotRng, n: usize, out: &mut [f64]) {
        self.fill(rng, 0, n, &self.init_root, out);
        for j in 0..n {
            for (o, m) in out[j * self.dim..(j + 1) * self.dim].iter_mut().zip(&self.mean) {
                *o += m;
            }
        }
    }

    fn noises(&self, rng: &mut SlotRng, t: usize, n: usize, out: &mut [f64]) {
        self.fill(rng, t, n, &self.noise_root, out);
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `out (+)= alpha · M x` for a row-major `rows × cols` matrix.
#[inline]
fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64], alpha: f64, accumulate: bool) {
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for k in 0..cols {
            acc += row[k] * x[k];
        }
        if accumulate {
            out[i] += alpha * acc;
        } else {
            out[i] = alpha * acc;
        }
    }
}

#[inline]
fn quad(m: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for k in 0..d {
            row += m[i * d + k] * v[k];
        }
        acc += v[i] * row;
    }
    acc
}

fn average(buf: &[f64], n: usize, d: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..n {
        for k in 0..d {
            out[k] += buf[j * d + k];
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub lifted_states: Vec<LiftedVector>,
    pub lifted_actions: Vec<LiftedVector>,
    pub per_step_costs: Vec<f64>,
    /// `(1−γ)Σ γ^{t−1} c_t`
    pub discounted_cost: f64,
    /// `(1−γ)Σ γ^{t−1} 𝐱_t𝐱_tᵀ`
    pub second_moment: DMatrix<f64>,
    /// Raw states of every player per step, when requested.
    pub all_states: Option<Vec<Vec<DVector<f64>>>>,
    /// The state guard fired; costs are truncated at that step.
    pub overflowed: bool,
}

/// `(1−γ)Σ_t γ^{t−1} c_t` accumulated in index order.
pub fn discounted_sum(costs: &[f64], gamma: f64) -> f64 {
    let mut w = 1.0 - gamma;
    let mut acc = 0.0;
    for c in costs {
        acc += w * c;
        w *= gamma;
    }
    acc
}

/// Row-major copies of everything the inner loop touches.
struct Prepared {
    n: usize,
    dx: usize,
    du: usize,
    gamma: f64,
    a: Vec<f64>,
    a_bar: Vec<f64>,
    b: Vec<f64>,
    b_bar: Vec<f64>,
    q_blk: Vec<f64>,
    r_blk: Vec<f64>,
    /// `(θ, θ̄ − θ)` for the learner and for everyone else.
    learner: (Vec<f64>, Vec<f64>),
    others: (Vec<f64>, Vec<f64>),
    mean_field: bool,
}

fn split(v: &[f64], d: usize) -> LiftedVector {
    LiftedVector {
        delta: DVector::from_column_slice(&v[..d]),
        mean: DVector::from_column_slice(&v[d..]),
    }
}

fn one_rollout(p: &Prepared, cfg: &RolloutConfig, sampler: &dyn PrimitiveSampler, index: usize) -> RolloutTrace {
    let (n, dx, du) = (p.n, p.dx, p.du);
    let gamma = p.gamma;
    let mut rng = SlotRng::new(cfg.seed, stream_id(&[cfg.stream, index as u64]), n, dx);
    let mut states = vec![0.0; n * dx];
    let mut next = vec![0.0; n * dx];
    let mut actions = vec![0.0; n * du];
    let mut x_bar = vec![0.0; dx];
    let mut u_bar = vec![0.0; du];
    let mut xs = vec![0.0; 2 * dx];
    let mut us = vec![0.0; 2 * du];
    let mut drift = vec![0.0; dx];
    sampler.initial_states(&mut rng, n, &mut states);

    let full = cfg.detail == Detail::Full;
    let mut lifted_states = Vec::new();
    let mut lifted_actions = Vec::new();
    let mut all_states = cfg.record_all_players.then(Vec::new);
    let mut costs = Vec::with_capacity(cfg.horizon);
    let dim = 2 * dx;
    let mut moment = vec![0.0; dim * dim];
    let mut weight = 1.0 - gamma;
    let mut overflowed = false;

    for t in 0..cfg.horizon {
        average(&states, n, dx, &mut x_bar);
        for j in 0..n {
            let (th, gap) = if j == cfg.learner { &p.learner } else { &p.others };
            let u = &mut actions[j * du..(j + 1) * du];
            matvec(th, du, dx, &states[j * dx..(j + 1) * dx], u, -1.0, false);
            matvec(gap, du, dx, &x_bar, u, -1.0, true);
        }
        average(&actions, n, du, &mut u_bar);
        let l = cfg.learner;
        for k in 0..dx {
            xs[k] = states[l * dx + k] - x_bar[k];
            xs[dx + k] = x_bar[k];
        }
        for k in 0..du {
            us[k] = actions[l * du + k] - u_bar[k];
            us[du + k] = u_bar[k];
        }
        costs.push(quad(&p.q_blk, &xs) + quad(&p.r_blk, &us));
        for i in 0..dim {
            for k in 0..dim {
                moment[i * dim + k] += weight * xs[i] * xs[k];
            }
        }
        weight *= gamma;
        if full {
            lifted_states.push(split(&xs, dx));
            lifted_actions.push(split(&us, du));
        }
        if let Some(all) = all_states.as_mut() {
            all.push(states.chunks(dx).map(DVector::from_column_slice).collect());
        }
        if t + 1 == cfg.horizon {
            break;
        }
        sampler.noises(&mut rng, t + 1, n, &mut next);
        if p.mean_field {
            matvec(&p.a_bar, dx, dx, &x_bar, &mut drift, 1.0, false);
            matvec(&p.b_bar, dx, du, &u_bar, &mut drift, 1.0, true);
        }
        let mut blown = false;
        for j in 0..n {
            let x = &states[j * dx..(j + 1) * dx];
            let out = &mut next[j * dx..(j + 1) * dx];
            matvec(&p.a, dx, dx, x, out, 1.0, true);
            matvec(&p.b, dx, du, &actions[j * du..(j + 1) * du], out, 1.0, true);
            if p.mean_field {
                for k in 0..dx {
                    out[k] += drift[k];
                }
            }
            if let Some(g) = cfg.guard {
                blown |= out.iter().any(|v| !v.is_finite() || v.abs() > g);
            }
        }
        std::mem::swap(&mut states, &mut next);
        if blown {
            overflowed = true;
            break;
        }
    }
    RolloutTrace {
        discounted_cost: discounted_sum(&costs, gamma),
        per_step_costs: costs,
        second_moment: DMatrix::from_row_slice(dim, dim, &moment),
        lifted_states,
        lifted_actions,
        all_states,
        overflowed,
    }
}

/// Simulates `cfg.n_rollouts` independent games with i.i.d. Gaussian primitives.
pub fn rollout(
    spec: &GameSpec,
    learner_policy: &Policy,
    others_policy: &Policy,
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutTrace>> {
    rollout_with_sampler(spec, learner_policy, others_policy, cfg, &IidGaussian::new(spec))
}

pub fn rollout_with_sampler(
    spec: &GameSpec,
    learner_policy: &Policy,
    others_policy: &Policy,
    cfg: &RolloutConfig,
    sampler: &dyn PrimitiveSampler,
) -> Result<Vec<RolloutTrace>> {
    let n = spec.n.finite().ok_or(Error::InfinitePopulation)?;
    for p in [learner_policy, others_policy] {
        if p.theta.shape() != (spec.d_u, spec.d_x) {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, expected {}x{}",
                p.d_u(),
                p.d_x(),
                spec.d_u,
                spec.d_x
            )));
        }
    }
    if cfg.learner >= n {
        return Err(Error::Dimension(format!(
            "learner index {} out of range for {n} players",
            cfg.learner
        )));
    }
    if cfg.horizon == 0 {
        return Err(Error::Precondition("horizon must be positive".into()));
    }
    let lifted = spec.lift()?;
    let gains = |p: &Policy| (row_major(&p.theta), row_major(&(&p.theta_bar - &p.theta)));
    let prepared = Prepared {
        n,
        dx: spec.d_x,
        du: spec.d_u,
        gamma: spec.gamma,
        a: row_major(&spec.a),
        a_bar: row_major(&spec.a_bar),
        b: row_major(&spec.b),
        b_bar: row_major(&spec.b_bar),
        q_blk: row_major(&lifted.q),
        r_blk: row_major(&lifted.r),
        learner: gains(learner_policy),
        others: gains(others_policy),
        mean_field: spec.a_bar.amax() != 0.0 || spec.b_bar.amax() != 0.0,
    };
    Ok((0..cfg.n_rollouts)
        .into_par_iter()
        .map(|i| one_rollout(&prepared, cfg, sampler, i))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

fn usable(traces: &[RolloutTrace]) -> Result<Vec<&RolloutTrace>> {
    let ok: Vec<_> = traces.iter().filter(|t| !t.overflowed).collect();
    if ok.is_empty() {
        return Err(Error::EmptyTraces);
    }
    Ok(ok)
}

/// Mean of `J̃_T` over non-overflowed traces, with its standard error.
pub fn empirical_cost(traces: &[RolloutTrace]) -> Result<Estimate> {
    let ok = usable(traces)?;
    let k = ok.len() as f64;
    let mean = ok.iter().map(|t| t.discounted_cost).sum::<f64>() / k;
    let var = if ok.len() > 1 {
        ok.iter().map(|t| (t.discounted_cost - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(Estimate {
        mean,
        std_error: (var / k).sqrt(),
        count: ok.len(),
    })
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub covariance: CovarianceMatrix,
    /// Entrywise standard error of the mean.
    pub std_error: DMatrix<f64>,
}

/// `Σ̃ = (1−γ)E[Σ γ^{t−1}𝐱_t𝐱_tᵀ]` estimated from the traces.
pub fn empirical_covariance(traces: &[RolloutTrace]) -> Result<CovarianceEstimate> {
    let ok = usable(traces)?;
    let k = ok.len() as f64;
    let dim = ok[0].second_moment.nrows();
    let mut mean = DMatrix::zeros(dim, dim);
    for t in &ok {
        mean += &t.second_moment;
    }
    mean /= k;
    let mut var = DMatrix::zeros(dim, dim);
    if ok.len() > 1 {
        for t in &ok {
            var += (&t.second_moment - &mean).map(|v| v * v);
        }
        var /= k - 1.0;
    }
    Ok(CovarianceEstimate {
        covariance: CovarianceMatrix {
            sigma: symmetrize(&mean),
        },
        std_error: (var / k).map(f64::sqrt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::Population;
    use approx::assert_relative_eq;

    fn ex2() -> GameSpec {
        GameSpec::scalar(Population::Finite(10), 0.9, 1.0, 0.5, 1.0, 2.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.05, 0.01)
    }

    #[test]
    fn one_step_decay() {
        let mut spec = GameSpec::scalar(Population::Finite(3), 0.9, 0.0, 0.0, 1.0, 4.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0);
        spec.b = DMatrix::zeros(1, 1);
        let p = Policy::scalar(0.0, 0.0);
        let traces = rollout(&spec, &p, &p, &RolloutConfig::new(20, 2, 1)).unwrap();
        // x = 2 for everyone: delta 0, mean 2, cost 9·4.
        let c1 = 36.0;
        assert_relative_eq!(traces[0].per_step_costs[0], c1);
        assert_relative_eq!(traces[0].discounted_cost, 0.1 * c1, epsilon = 1e-14);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let spec = ex2();
        let p = Policy::scalar(0.7, 1.1);
        let mut cfg = RolloutConfig::new(30, 8, 42);
        cfg.detail = Detail::Full;
        let a = rollout(&spec, &p, &p, &cfg).unwrap();
        let b = rollout(&spec, &p, &p, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.per_step_costs, y.per_step_costs);
            assert_eq!(x.lifted_states, y.lifted_states);
            assert_eq!(x.discounted_cost.to_bits(), y.discounted_cost.to_bits());
        }
        cfg.seed = 43;
        let c = rollout(&spec, &p, &p, &cfg).unwrap();
        assert_ne!(a[0].per_step_costs, c[0].per_step_costs);
    }

    #[test]
    fn discounted_cost_recomputes_exactly() {
        let spec = ex2();
        let p = Policy::scalar(0.7, 1.1);
        let traces = rollout(&spec, &p, &p, &RolloutConfig::new(50, 4, 3)).unwrap();
        for t in &traces {
            assert_eq!(t.discounted_cost, discounted_sum(&t.per_step_costs, spec.gamma));
        }
    }

    #[test]
    fn mean_block_is_population_average() {
        let spec = ex2();
        let p = Policy::scalar(0.7, 1.1);
        let mut cfg = RolloutConfig::new(25, 2, 9);
        cfg.detail = Detail::Full;
        cfg.record_all_players = true;
        cfg.learner = 4;
        for tr in rollout(&spec, &Policy::scalar(0.2, 0.9), &p, &cfg).unwrap() {
            let all = tr.all_states.as_ref().unwrap();
            for (t, xs) in tr.lifted_states.iter().enumerate() {
                let mut avg = DVector::zeros(1);
                for x in &all[t] {
                    avg += x;
                }
                avg /= all[t].len() as f64;
                assert!((&xs.mean - &avg).amax() <= 1e-12);
                assert!((xs.reconstruct() - &all[t][4]).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_states_zero_covariance() {
        let spec = GameSpec::scalar(Population::Finite(2), 0.9, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let p = Policy::scalar(0.0, 0.0);
        let traces = rollout(&spec, &p, &p, &RolloutConfig::new(5, 1, 0)).unwrap();
        let c = empirical_covariance(&traces).unwrap();
        assert_eq!(c.covariance.sigma, DMatrix::zeros(2, 2));
    }

    #[test]
    fn empty_traces_rejected() {
        assert!(matches!(empirical_cost(&[]), Err(Error::EmptyTraces)));
        assert!(matches!(empirical_covariance(&[]), Err(Error::EmptyTraces)));
    }

    #[test]
    fn infinite_population_rejected() {
        let spec = ex2().with_population(Population::Infinite);
        let p = Policy::scalar(0.7, 1.1);
        assert!(matches!(
            rollout(&spec, &p, &p, &RolloutConfig::new(5, 1, 0)),
            Err(Error::InfinitePopulation)
        ));
    }

    #[test]
    fn guard_flags_explosive_rollouts() {
        let spec = GameSpec::scalar(Population::Finite(2), 0.9, 3.0, 0.5, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.1, 0.1);
        let p = Policy::scalar(0.0, 0.0);
        let traces = rollout(&spec, &p, &p, &RolloutConfig::new(200, 3, 0)).unwrap();
        assert!(traces.iter().all(|t| t.overflowed));
        assert!(matches!(empirical_cost(&traces), Err(Error::EmptyTraces)));
    }
}
