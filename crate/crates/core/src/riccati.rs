//! Nash gains from the coupled (non-standard) Riccati fixed point, and the
//! decoupled standard Riccati pair of the infinite population.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{LiftedModel, Population};
use crate::linalg::{
    block_diag, condition_number, discounted_lyapunov, min_eigenvalue, spectral_radius,
    symmetrize, trace_product,
};

pub const SINGULAR_COND: f64 = 1e12;

/// Gain pair `(θ, θ̄)`; the strategy is `u = −θx − (θ̄ − θ)x̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub theta: DMatrix<f64>,
    pub theta_bar: DMatrix<f64>,
}

impl Policy {
    pub fn new(theta: DMatrix<f64>, theta_bar: DMatrix<f64>) -> Self {
        assert_eq!(theta.shape(), theta_bar.shape(), "gain blocks differ in shape");
        Policy { theta, theta_bar }
    }

    pub fn zeros(d_u: usize, d_x: usize) -> Self {
        Policy::new(DMatrix::zeros(d_u, d_x), DMatrix::zeros(d_u, d_x))
    }

    pub fn scalar(theta: f64, theta_bar: f64) -> Self {
        Policy::new(
            DMatrix::from_element(1, 1, theta),
            DMatrix::from_element(1, 1, theta_bar),
        )
    }

    pub fn d_u(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.theta.ncols()
    }

    /// `diag(θ, θ̄)`
    pub fn block(&self) -> DMatrix<f64> {
        block_diag(&self.theta, &self.theta_bar)
    }

    pub fn closed_loop(&self, m: &LiftedModel) -> DMatrix<f64> {
        &m.a - &m.b * self.block()
    }

    /// `ρ(𝐀 − 𝐁𝛉)`
    pub fn spectral_radius(&self, m: &LiftedModel) -> f64 {
        spectral_radius(&self.closed_loop(m))
    }

    pub fn is_stable(&self, m: &LiftedModel) -> bool {
        self.spectral_radius(m) < 1.0
    }

    pub fn norm(&self) -> f64 {
        (self.theta.norm_squared() + self.theta_bar.norm_squared()).sqrt()
    }

    /// Row-major `θ` entries followed by row-major `θ̄` entries.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.theta.len());
        for m in [&self.theta, &self.theta_bar] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        }
        out
    }

    pub fn from_flat(d_u: usize, d_x: usize, v: &[f64]) -> Self {
        assert_eq!(v.len(), 2 * d_u * d_x);
        let k = d_u * d_x;
        Policy::new(
            DMatrix::from_row_slice(d_u, d_x, &v[..k]),
            DMatrix::from_row_slice(d_u, d_x, &v[k..]),
        )
    }

    pub fn add(&self, other: &Policy) -> Policy {
        Policy::new(&self.theta + &other.theta, &self.theta_bar + &other.theta_bar)
    }

    pub fn sub(&self, other: &Policy) -> Policy {
        Policy::new(&self.theta - &other.theta, &self.theta_bar - &other.theta_bar)
    }
}

/// `M(𝛉)` with `d_x × d_x` block accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix {
    pub m: DMatrix<f64>,
}

impl ValueMatrix {
    fn half(&self) -> usize {
        self.m.nrows() / 2
    }

    fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.half();
        self.m.view((i * d, j * d), (d, d)).into_owned()
    }

    pub fn m11(&self) -> DMatrix<f64> {
        self.block(0, 0)
    }

    pub fn m12(&self) -> DMatrix<f64> {
        self.block(0, 1)
    }

    pub fn m21(&self) -> DMatrix<f64> {
        self.block(1, 0)
    }

    pub fn m22(&self) -> DMatrix<f64> {
        self.block(1, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrices {
    pub f: DMatrix<f64>,
    pub f_bar: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub k_bar: DMatrix<f64>,
}

impl GainMatrices {
    pub fn cond_f(&self) -> f64 {
        condition_number(&self.f)
    }

    pub fn cond_f_bar(&self) -> f64 {
        condition_number(&self.f_bar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueInit {
    /// `M₀ = 𝐐`
    Q,
    /// `M₀ = c·I`
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// `ω` in `M ← (1−ω)M + ωL(G(M))`.
    pub relaxation: f64,
    pub init: ValueInit,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 100_000,
            relaxation: 1.0,
            init: ValueInit::Q,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NashSolution {
    pub policy: Policy,
    pub value: ValueMatrix,
    pub gains: GainMatrices,
    pub iterations: usize,
    pub residual: f64,
    pub cond_f: f64,
    pub cond_f_bar: f64,
    /// Largest ratio of successive residuals over the tail of the run.
    pub contraction_ratio: f64,
    /// Smallest eigenvalue of `(1−1/n)F_n + (1/n)F̄_n`.
    pub weighted_f_min_eigenvalue: f64,
}

impl NashSolution {
    pub fn weighted_f_positive_definite(&self) -> bool {
        self.weighted_f_min_eigenvalue > 0.0
    }
}

/// `M(𝛉) = 𝐐 + 𝛉ᵀ𝐑𝛉 + γ(𝐀−𝐁𝛉)ᵀM(𝛉)(𝐀−𝐁𝛉)`.
pub fn value_matrix(policy: &Policy, m: &LiftedModel, tol: f64) -> Result<ValueMatrix> {
    value_matrix_for_gain(&policy.block(), m, tol)
}

/// Same equation for an arbitrary lifted gain `K` (not necessarily block diagonal).
pub fn value_matrix_for_gain(k: &DMatrix<f64>, m: &LiftedModel, tol: f64) -> Result<ValueMatrix> {
    let acl = &m.a - &m.b * k;
    let stage = &m.q + k.transpose() * &m.r * k;
    let x = discounted_lyapunov(&acl, &stage, m.gamma, tol)?;
    Ok(ValueMatrix { m: x })
}

/// One backward-induction step `𝐐 + 𝛉ᵀ𝐑𝛉 + γ(𝐀−𝐁𝛉)ᵀM(𝐀−𝐁𝛉)`.
fn bellman_step(policy: &Policy, value: &ValueMatrix, m: &LiftedModel) -> ValueMatrix {
    let k = policy.block();
    let acl = &m.a - &m.b * &k;
    let next = &m.q + k.transpose() * &m.r * &k + acl.transpose() * &value.m * &acl * m.gamma;
    ValueMatrix { m: symmetrize(&next) }
}

/// Gains `F_n, F̄_n, K_n, K̄_n` assembled from the value blocks, then `θ = F_n⁻¹K_n`,
/// `θ̄ = F̄_n⁻¹K̄_n`.
pub fn gain_map(value: &ValueMatrix, m: &LiftedModel) -> Result<(Policy, GainMatrices)> {
    let s = &m.spec;
    let g = m.gamma;
    let w = m.population().weight();
    let wc = m.population().complement();
    let b = &s.b;
    let bp = &s.b + &s.b_bar;
    let a = &s.a;
    let ap = &s.a + &s.a_bar;
    let (m11, m12, m21, m22) = (value.m11(), value.m12(), value.m21(), value.m22());
    let bt = b.transpose();
    let bpt = bp.transpose();

    let f = (&s.r + &bt * &m11 * b * g) * wc + (&s.r + &s.s_u + &bpt * &m21 * b * g) * w;
    let k = (&bt * &m11 * a * g) * wc + (&bpt * &m21 * a * g) * w;
    let f_bar = (&s.r + &s.s_u + &bt * &m12 * &bp * g) * wc
        + (&s.r + &s.s_u * 2.0 + &s.r_bar + &bpt * &m22 * &bp * g) * w;
    let k_bar = (&bt * &m12 * &ap * g) * wc + (&bpt * &m22 * &ap * g) * w;

    let gains = GainMatrices { f, f_bar, k, k_bar };
    let (cf, cfb) = (gains.cond_f(), gains.cond_f_bar());
    if !(cf < SINGULAR_COND && cfb < SINGULAR_COND) {
        return Err(Error::SingularGain {
            cond_f: cf,
            cond_f_bar: cfb,
        });
    }
    let singular = || Error::SingularGain {
        cond_f: cf,
        cond_f_bar: cfb,
    };
    let theta = gains.f.clone().lu().solve(&gains.k).ok_or_else(singular)?;
    let theta_bar = gains.f_bar.clone().lu().solve(&gains.k_bar).ok_or_else(singular)?;
    Ok((Policy::new(theta, theta_bar), gains))
}

fn initial_value(m: &LiftedModel, init: ValueInit) -> ValueMatrix {
    match init {
        ValueInit::Q => ValueMatrix { m: m.q.clone() },
        ValueInit::Scaled(c) => ValueMatrix {
            m: DMatrix::identity(m.q.nrows(), m.q.ncols()) * c,
        },
    }
}

/// `L(G(M))`: exact evaluation of the gain map's policy, or a single backward step
/// when that policy does not have a finite discounted value.
fn fixed_point_map(value: &ValueMatrix, m: &LiftedModel, tol: f64) -> Result<ValueMatrix> {
    let (policy, _) = gain_map(value, m)?;
    match value_matrix(&policy, m, tol * 1e-3) {
        Ok(v) => Ok(v),
        Err(Error::UnstablePolicy { .. }) => Ok(bellman_step(&policy, value, m)),
        Err(e) => Err(e),
    }
}

/// Iterates `M ← L(G(M))` until successive iterates agree to `tol` (Frobenius).
pub fn solve_nash(m: &LiftedModel, opts: &SolverOptions) -> Result<NashSolution> {
    let mut value = initial_value(m, opts.init);
    let omega = opts.relaxation;
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::Precondition(format!(
            "relaxation must lie in (0, 1], got {omega}"
        )));
    }
    let mut min_residual = f64::INFINITY;
    let mut residuals: Vec<f64> = Vec::new();
    for iter in 1..=opts.max_iter {
        let mapped = fixed_point_map(&value, m, opts.tol)?;
        let next = ValueMatrix {
            m: symmetrize(&(&value.m * (1.0 - omega) + &mapped.m * omega)),
        };
        let residual = (&next.m - &value.m).norm();
        value = next;
        if !residual.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                residual,
                minimum: min_residual,
            });
        }
        residuals.push(residual);
        if residual <= opts.tol {
            return finish(m, value, iter, residual, &residuals);
        }
        if residual > 10.0 * min_residual && residual > 100.0 * opts.tol {
            return Err(Error::Diverged {
                iteration: iter,
                residual,
                minimum: min_residual,
            });
        }
        min_residual = min_residual.min(residual);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

fn finish(
    m: &LiftedModel,
    value: ValueMatrix,
    iterations: usize,
    residual: f64,
    residuals: &[f64],
) -> Result<NashSolution> {
    let (policy, gains) = gain_map(&value, m)?;
    let radius = policy.spectral_radius(m);
    if radius >= 1.0 {
        return Err(Error::UnstableFixedPoint { radius });
    }
    let tail = &residuals[residuals.len().saturating_sub(6)..];
    let contraction_ratio = tail
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let weighted = &gains.f * m.population().complement() + &gains.f_bar * m.population().weight();
    Ok(NashSolution {
        cond_f: gains.cond_f(),
        cond_f_bar: gains.cond_f_bar(),
        weighted_f_min_eigenvalue: min_eigenvalue(&weighted),
        policy,
        value,
        gains,
        iterations,
        residual,
        contraction_ratio,
    })
}

/// Finite-horizon backward induction of the coupled recursion from a zero terminal value.
/// Returns the first-stage policy and value.
pub fn backward_induction(m: &LiftedModel, horizon: usize) -> Result<(Policy, ValueMatrix)> {
    let dim = m.q.nrows();
    let mut value = ValueMatrix {
        m: DMatrix::zeros(dim, dim),
    };
    let mut policy = Policy::zeros(m.d_u(), m.d_x());
    for _ in 0..horizon {
        policy = gain_map(&value, m)?.0;
        value = bellman_step(&policy, &value, m);
    }
    Ok((policy, value))
}

/// Stabilizing solution of one standard discounted Riccati equation by value iteration.
/// Returns `(P, gain)`.
pub fn standard_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut p = DMatrix::zeros(a.nrows(), a.ncols());
    let gain_of = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let lhs = r + b.transpose() * p * b * gamma;
        let rhs = b.transpose() * p * a * gamma;
        lhs.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Precondition("R + γBᵀPB singular".into()))
    };
    for iter in 1..=max_iter {
        let k = gain_of(&p)?;
        let acl = a - b * &k;
        let next = symmetrize(&(q + k.transpose() * r * &k + acl.transpose() * &p * &acl * gamma));
        let resid = (&next - &p).norm();
        p = next;
        if !resid.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                residual: resid,
                minimum: f64::NAN,
            });
        }
        if resid <= tol * (1.0 + p.norm()) {
            let k = gain_of(&p)?;
            return Ok((p, k));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// Mean-field limit gains from the two decoupled Riccati equations with data
/// `(A, B, Q, R)` and `(A, B, Q+Sˣ, R+Sᵘ)`.
pub fn decoupled_infinite(m: &LiftedModel) -> Result<Policy> {
    let s = &m.spec;
    if s.a_bar.amax() != 0.0 || s.b_bar.amax() != 0.0 {
        return Err(Error::Precondition("decoupling needs A_bar = B_bar = 0".into()));
    }
    let q_sx = &s.q + &s.s_x;
    let r_su = &s.r + &s.s_u;
    for (name, mat, strict) in [
        ("Q", &s.q, false),
        ("Q+S_x", &q_sx, false),
        ("R", &s.r, true),
        ("R+S_u", &r_su, true),
    ] {
        let lo = min_eigenvalue(mat);
        if lo < -1e-12 || (strict && lo <= 0.0) {
            let kind = if strict { "positive definite" } else { "PSD" };
            return Err(Error::Precondition(format!(
                "{name} must be {kind} (min eigenvalue {lo:e})"
            )));
        }
    }
    let (_, theta) = standard_riccati(&s.a, &s.b, &s.q, &s.r, m.gamma, 1e-14, 1_000_000)?;
    let (_, theta_bar) = standard_riccati(&s.a, &s.b, &q_sx, &r_su, m.gamma, 1e-14, 1_000_000)?;
    Ok(Policy::new(theta, theta_bar))
}

/// `(1−γ)tr(M𝚺_x) + γ tr(M𝚺_w)`.
pub fn cost_from_value(value: &ValueMatrix, m: &LiftedModel) -> f64 {
    (1.0 - m.gamma) * trace_product(&value.m, &m.sigma_x)
        + m.gamma * trace_product(&value.m, &m.sigma_w)
}

pub fn nash_cost(sol: &NashSolution, m: &LiftedModel) -> f64 {
    cost_from_value(&sol.value, m)
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplicityReport {
    pub gain_gap: f64,
    pub distinct: bool,
}

/// Solves from `M₀ = 𝐐` and from `M₀ = 10·I` and compares the gains.
pub fn probe_multiplicity(m: &LiftedModel, opts: &SolverOptions) -> Result<MultiplicityReport> {
    let a = solve_nash(m, &SolverOptions { init: ValueInit::Q, ..*opts })?;
    let b = solve_nash(m, &SolverOptions { init: ValueInit::Scaled(10.0), ..*opts })?;
    let gap = a.policy.sub(&b.policy).norm();
    Ok(MultiplicityReport {
        gain_gap: gap,
        distinct: gap > 1e-6 * (1.0 + a.policy.norm()),
    })
}

/// Convenience: the lifted model at another population size.
pub fn with_population(m: &LiftedModel, n: Population) -> Result<LiftedModel> {
    let mut lifted = m.spec.with_population(n).lift()?;
    lifted.gamma = m.gamma;
    Ok(lifted)
}
