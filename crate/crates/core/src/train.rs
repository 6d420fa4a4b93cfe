//! Model-based GD / NPGD training loops.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::LiftedModel;
use crate::gradient::{evaluate, gd_step, learner_cost, npg_step, npg_step_size, Evaluation};
use crate::riccati::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gd,
    Npg,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Method::Gd),
            "npg" | "npgd" => Ok(Method::Npg),
            _ => Err(Error::Config(format!("unknown method {s:?} (gd or npg)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    Fixed(f64),
    /// Largest provably safe step for NPGD; halving backtracking from `initial` for GD.
    Auto { initial: f64 },
}

impl std::str::FromStr for StepSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(StepSize::Auto { initial: 1.0 });
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(StepSize::Fixed(v)),
            _ => Err(Error::Config(format!("eta must be a non-negative number or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOptions {
    pub method: Method,
    pub step: StepSize,
    pub max_iter: usize,
    pub stop_tol: f64,
    /// `J(𝛉*)`; when present the run stops on `|J(𝛉_k) − J(𝛉*)| ≤ stop_tol`.
    pub nash_cost: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            method: Method::Gd,
            step: StepSize::Fixed(0.1),
            max_iter: 10_000,
            stop_tol: 1e-10,
            nash_cost: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub k: usize,
    #[serde(skip)]
    pub policy: Policy,
    pub cost: f64,
    pub grad_norm: f64,
    pub rho: f64,
    /// Step used to leave this iterate; zero on the last record.
    pub step: f64,
    pub elapsed_ms: f64,
    pub empirical_cost: Option<f64>,
    pub rejected: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TerminalStatus {
    Converged,
    MaxIter,
    Destabilized { iteration: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub terminal_status: TerminalStatus,
    #[serde(skip)]
    pub final_policy: Policy,
}

impl TrainLog {
    pub fn new(records: Vec<TrainRecord>, terminal_status: TerminalStatus, final_policy: Policy) -> Self {
        TrainLog {
            records,
            terminal_status,
            final_policy,
        }
    }

    /// First `k` with `|J_k − J*| ≤ tol`.
    pub fn first_within(&self, j_star: f64, tol: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| (r.cost - j_star).abs() <= tol)
            .map(|r| r.k)
    }
}

fn record(k: usize, policy: &Policy, eval: &Evaluation, m: &LiftedModel, start: Instant) -> TrainRecord {
    TrainRecord {
        k,
        policy: policy.clone(),
        cost: eval.cost,
        grad_norm: eval.gradient.norm(),
        rho: policy.spectral_radius(m),
        step: 0.0,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        empirical_cost: None,
        rejected: None,
    }
}

/// Halves `eta` until the learner's unilateral deviation cost drops below `J(𝛉_k)`.
fn backtrack(policy: &Policy, eval: &Evaluation, m: &LiftedModel, initial: f64) -> (Policy, f64) {
    let mut eta = initial;
    for _ in 0..60 {
        let cand = gd_step(policy, &eval.gradient, eta);
        if cand.is_stable(m) {
            if let Ok(j) = learner_cost(&cand, policy, m) {
                if j < eval.cost {
                    return (cand, eta);
                }
            }
        }
        eta *= 0.5;
    }
    (policy.clone(), 0.0)
}

/// Runs GD or NPGD from `init` with exact model quantities.
pub fn train_model_based(m: &LiftedModel, init: &Policy, opts: &TrainOptions) -> Result<TrainLog> {
    let radius = init.spectral_radius(m);
    if radius >= 1.0 {
        return Err(Error::InitialUnstable { radius });
    }
    let start = Instant::now();
    let mut policy = init.clone();
    let mut eval = evaluate(&policy, m)?;
    let theorem_eta = npg_step_size(m, eval.cost, m.mu());
    let mut records = Vec::new();

    for k in 0..=opts.max_iter {
        let mut rec = record(k, &policy, &eval, m, start);
        let done = match opts.nash_cost {
            Some(j_star) => (eval.cost - j_star).abs() <= opts.stop_tol,
            None => rec.grad_norm <= opts.stop_tol,
        };
        if done {
            records.push(rec);
            return Ok(TrainLog::new(records, TerminalStatus::Converged, policy));
        }
        if k == opts.max_iter {
            records.push(rec);
            break;
        }
        let (next, eta) = match (opts.method, opts.step) {
            (Method::Gd, StepSize::Fixed(eta)) => (gd_step(&policy, &eval.gradient, eta), eta),
            (Method::Gd, StepSize::Auto { initial }) => backtrack(&policy, &eval, m, initial),
            (Method::Npg, StepSize::Fixed(eta)) => {
                (npg_step(&policy, &eval.gradient, &eval.covariance, eta)?, eta)
            }
            (Method::Npg, StepSize::Auto { .. }) => (
                npg_step(&policy, &eval.gradient, &eval.covariance, theorem_eta)?,
                theorem_eta,
            ),
        };
        rec.step = eta;
        records.push(rec);
        if !next.is_stable(m) {
            return Ok(TrainLog::new(
                records,
                TerminalStatus::Destabilized { iteration: k + 1 },
                next,
            ));
        }
        policy = next;
        eval = evaluate(&policy, m)?;
    }
    Ok(TrainLog::new(records, TerminalStatus::MaxIter, policy))
}
