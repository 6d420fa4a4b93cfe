//! Sphere-smoothed zeroth-order gradient estimates and the model-free training loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{GameSpec, LiftedModel};
use crate::gradient::{gd_step, npg_step, policy_cost, GradientPair};
use crate::riccati::Policy;
use crate::rng::{stream_id, SlotRng};
use crate::sim::{empirical_cost, empirical_covariance, rollout, RolloutConfig, STATE_GUARD};
use crate::train::{Method, TerminalStatus, TrainLog, TrainRecord};

const SPHERE: u64 = 1;
const PERTURBED: u64 = 2;
const UNPERTURBED: u64 = 3;
const LEARNER: u64 = 4;

#[derive(Debug, Clone, Serialize)]
pub struct SmoothingConfig {
    /// Smoothing radius `r`.
    pub radius: f64,
    /// Perturbation count `L`.
    pub samples: usize,
    /// Rollout horizon `T`.
    pub horizon: usize,
    pub rollouts_per_perturbation: usize,
    /// `None` disables the state-norm guard.
    pub guard: Option<f64>,
}

impl SmoothingConfig {
    pub fn new(radius: f64, samples: usize, horizon: usize) -> Self {
        SmoothingConfig {
            radius,
            samples,
            horizon,
            rollouts_per_perturbation: 1,
            guard: Some(STATE_GUARD),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.radius.is_nan() || self.radius <= 0.0 || self.samples == 0 || self.horizon == 0 || self.rollouts_per_perturbation == 0 {
            return Err(Error::Precondition(format!(
                "smoothing needs r > 0 and positive L, T, rollouts (got r={}, L={}, T={}, m={})",
                self.radius, self.samples, self.horizon, self.rollouts_per_perturbation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationSample {
    pub theta_tilde: nalgebra::DMatrix<f64>,
    pub theta_bar_tilde: nalgebra::DMatrix<f64>,
    /// `J̃_T` at the perturbed policy; `None` if every rollout hit the guard.
    pub cost_sample: Option<f64>,
}

impl PerturbationSample {
    pub fn as_policy(&self) -> Policy {
        Policy::new(self.theta_tilde.clone(), self.theta_bar_tilde.clone())
    }
}

/// Uniform draw on the Frobenius sphere of radius `r` in the `(θ̃, θ̄̃)` pair space.
pub fn sample_sphere(d_u: usize, d_x: usize, r: f64, rng: &mut SlotRng, slot: usize) -> Policy {
    let dim = 2 * d_u * d_x;
    let mut z = vec![0.0; dim];
    rng.normals(slot, 0, &mut z);
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scaled: Vec<f64> = z.iter().map(|v| v * r / norm).collect();
    Policy::from_flat(d_u, d_x, &scaled)
}

/// Sphere generator for one gradient estimate.
pub fn sphere_rng(seed: u64, stream: u64, d_u: usize, d_x: usize) -> SlotRng {
    SlotRng::new(seed, stream_id(&[stream, SPHERE]), 1, 2 * d_u * d_x)
}

#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub gradient: GradientPair,
    pub samples: Vec<PerturbationSample>,
    pub rejected: usize,
}

/// `(2d_xd_u/(r²L)) Σ_l J̃_T(𝛉 + 𝛉̃_l)[θ̃_l, θ̄̃_l]`, learner perturbed, imitators at `𝛉`.
///
/// `stream` separates estimates that share a seed.
pub fn empirical_gradient(
    policy: &Policy,
    spec: &GameSpec,
    smoothing: &SmoothingConfig,
    seed: u64,
    stream: u64,
    learner: usize,
) -> Result<GradientEstimate> {
    smoothing.validate()?;
    spec.n.finite().ok_or(Error::InfinitePopulation)?;
    let (du, dx) = (spec.d_u, spec.d_x);
    let r = smoothing.radius;
    let mut sphere = sphere_rng(seed, stream, du, dx);
    let perturbations: Vec<Policy> = (0..smoothing.samples)
        .map(|l| sample_sphere(du, dx, r, &mut sphere, l))
        .collect();

    let samples: Vec<PerturbationSample> = perturbations
        .into_par_iter()
        .enumerate()
        .map(|(l, tilde)| -> Result<PerturbationSample> {
            let cfg = RolloutConfig {
                learner,
                stream: stream_id(&[stream, PERTURBED, l as u64]),
                guard: smoothing.guard,
                ..RolloutConfig::new(smoothing.horizon, smoothing.rollouts_per_perturbation, seed)
            };
            let traces = rollout(spec, &policy.add(&tilde), policy, &cfg)?;
            let cost = if traces.iter().any(|t| t.overflowed) {
                None
            } else {
                Some(traces.iter().map(|t| t.discounted_cost).sum::<f64>() / traces.len() as f64)
            };
            Ok(PerturbationSample {
                theta_tilde: tilde.theta,
                theta_bar_tilde: tilde.theta_bar,
                cost_sample: cost,
            })
        })
        .collect::<Result<_>>()?;

    let (gradient, rejected) = combine_samples(&samples, du, dx, r);
    Ok(GradientEstimate {
        gradient,
        samples,
        rejected,
    })
}

/// Weighted sum over accepted samples with prefactor `2d_xd_u/(r²L_accepted)`.
/// Returns the estimate and the number of rejected samples.
pub fn combine_samples(samples: &[PerturbationSample], d_u: usize, d_x: usize, r: f64) -> (GradientPair, usize) {
    let mut acc = Policy::zeros(d_u, d_x);
    let mut accepted = 0usize;
    for s in samples {
        if let Some(c) = s.cost_sample {
            acc = acc.add(&Policy::new(&s.theta_tilde * c, &s.theta_bar_tilde * c));
            accepted += 1;
        }
    }
    let rejected = samples.len() - accepted;
    if accepted == 0 {
        return (GradientPair::zeros(d_u, d_x), rejected);
    }
    let scale = 2.0 * (d_x * d_u) as f64 / (r * r * accepted as f64);
    (
        GradientPair {
            d_theta: acc.theta * scale,
            d_theta_bar: acc.theta_bar * scale,
        },
        rejected,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelFreeOptions {
    pub method: Method,
    pub eta: f64,
    pub iterations: usize,
    pub smoothing: SmoothingConfig,
    pub seed: u64,
    /// Pick the learner uniformly at every iteration instead of player 0.
    pub random_learner: bool,
    /// Unperturbed rollouts for the cost estimate and `Σ̃`; default `max(L/10, 50)`.
    pub baseline_rollouts: Option<usize>,
}

impl ModelFreeOptions {
    pub fn baseline_count(&self) -> usize {
        self.baseline_rollouts
            .unwrap_or_else(|| (self.smoothing.samples / 10).max(50))
    }
}

/// GD or NPGD driven by simulated costs only. `model`, when given, is used for
/// logging exact costs and for the stability check, never for the updates.
pub fn train_model_free(
    spec: &GameSpec,
    init: &Policy,
    opts: &ModelFreeOptions,
    model: Option<&LiftedModel>,
) -> Result<TrainLog> {
    let n = spec.n.finite().ok_or(Error::InfinitePopulation)?;
    if let Some(m) = model {
        let radius = init.spectral_radius(m);
        if radius >= 1.0 {
            return Err(Error::InitialUnstable { radius });
        }
    }
    let start = Instant::now();
    let mut learner_rng = SlotRng::new(opts.seed, stream_id(&[LEARNER]), 1, 1);
    let mut policy = init.clone();
    let mut records = Vec::with_capacity(opts.iterations + 1);

    for k in 0..=opts.iterations {
        let learner = if opts.random_learner {
            learner_rng.index(k, 0, n)
        } else {
            0
        };
        let base_cfg = RolloutConfig {
            learner,
            stream: stream_id(&[k as u64, UNPERTURBED]),
            guard: opts.smoothing.guard,
            ..RolloutConfig::new(opts.smoothing.horizon, opts.baseline_count(), opts.seed)
        };
        let baseline = rollout(spec, &policy, &policy, &base_cfg)?;
        let emp = empirical_cost(&baseline).ok();
        let exact = model.map(|m| policy_cost(&policy, m));
        let rho = model.map_or(f64::NAN, |m| policy.spectral_radius(m));
        let destabilized = match model {
            Some(_) => rho >= 1.0,
            None => emp.is_none(),
        };
        let mut rec = TrainRecord {
            k,
            policy: policy.clone(),
            cost: match exact {
                Some(Ok(j)) => j,
                _ => emp.map_or(f64::NAN, |e| e.mean),
            },
            grad_norm: f64::NAN,
            rho,
            step: 0.0,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            empirical_cost: emp.map(|e| e.mean),
            rejected: None,
        };
        if destabilized {
            records.push(rec);
            return Ok(TrainLog::new(records, TerminalStatus::Destabilized { iteration: k }, policy));
        }
        if k == opts.iterations {
            records.push(rec);
            break;
        }
        let est = empirical_gradient(&policy, spec, &opts.smoothing, opts.seed, k as u64, learner)?;
        rec.grad_norm = est.gradient.norm();
        rec.rejected = Some(est.rejected);
        rec.step = opts.eta;
        let next = match opts.method {
            Method::Gd => gd_step(&policy, &est.gradient, opts.eta),
            Method::Npg => {
                let sigma = empirical_covariance(&baseline)?;
                npg_step(&policy, &est.gradient, &sigma.covariance, opts.eta)?
            }
        };
        records.push(rec);
        policy = next;
    }
    Ok(TrainLog::new(records, TerminalStatus::MaxIter, policy))
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
    fn sphere_draws_have_radius_r() {
        let mut rng = sphere_rng(3, 0, 2, 3);
        for l in 0..100 {
            let p = sample_sphere(2, 3, 0.25, &mut rng, l);
            assert_relative_eq!(p.norm(), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn same_seed_same_estimate() {
        let spec = ex2();
        let p = Policy::scalar(1.0, 1.0);
        let s = SmoothingConfig::new(0.1, 40, 20);
        let a = empirical_gradient(&p, &spec, &s, 5, 0, 0).unwrap();
        let b = empirical_gradient(&p, &spec, &s, 5, 0, 0).unwrap();
        assert_eq!(a.gradient, b.gradient);
        let c = empirical_gradient(&p, &spec, &s, 6, 0, 0).unwrap();
        assert_ne!(a.gradient, c.gradient);
    }

    #[test]
    fn prefactor_scales_with_radius() {
        let one = |r: f64, c: f64| PerturbationSample {
            theta_tilde: nalgebra::DMatrix::from_element(1, 1, r),
            theta_bar_tilde: nalgebra::DMatrix::zeros(1, 1),
            cost_sample: Some(c),
        };
        let (g, rej) = combine_samples(&[one(0.1, 3.0)], 1, 1, 0.1);
        assert_eq!(rej, 0);
        assert_relative_eq!(g.d_theta[(0, 0)], 2.0 * 3.0 / 0.1, epsilon = 1e-12);
        // Doubling r doubles the direction weight and quarters the prefactor.
        let (h, _) = combine_samples(&[one(0.2, 3.0)], 1, 1, 0.2);
        assert_relative_eq!(h.d_theta[(0, 0)], g.d_theta[(0, 0)] / 2.0, epsilon = 1e-12);
        let rejected = PerturbationSample { cost_sample: None, ..one(0.1, 0.0) };
        let (k, rej) = combine_samples(&[one(0.1, 3.0), rejected], 1, 1, 0.1);
        assert_eq!(rej, 1);
        assert_eq!(k, g);
    }

    #[test]
    fn flat_landscape_without_guard() {
        let spec = GameSpec::scalar(Population::Finite(2), 0.9, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.1, 0.1);
        let mut s = SmoothingConfig::new(0.1, 16, 5);
        s.guard = None;
        let est = empirical_gradient(&Policy::scalar(0.0, 0.0), &spec, &s, 1, 0, 0).unwrap();
        assert_eq!(est.gradient, GradientPair::zeros(1, 1));
        assert_eq!(est.rejected, 0);
    }

    #[test]
    fn model_free_run_is_deterministic() {
        let spec = ex2();
        let m = spec.lift().unwrap();
        let opts = ModelFreeOptions {
            method: Method::Gd,
            eta: 0.04,
            iterations: 5,
            smoothing: SmoothingConfig::new(0.09, 20, 10),
            seed: 17,
            random_learner: true,
            baseline_rollouts: Some(10),
        };
        let a = train_model_free(&spec, &Policy::scalar(1.0, 1.0), &opts, Some(&m)).unwrap();
        let b = train_model_free(&spec, &Policy::scalar(1.0, 1.0), &opts, Some(&m)).unwrap();
        assert_eq!(a.final_policy, b.final_policy);
        assert_eq!(a.records.len(), 6);
    }
}
