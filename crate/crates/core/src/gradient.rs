//! Exact cost, discounted state covariance and the learner's policy gradient,
//! plus the GD / NPGD update rules.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{LiftedModel, Population};
use crate::linalg::{discounted_lyapunov, sigma_min, spectral_norm, symmetrize, trace_product};
use crate::riccati::{cost_from_value, value_matrix_for_gain, NashSolution, Policy, ValueMatrix};

/// Tolerance used for every internal Lyapunov solve.
pub const LYAP_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub d_theta: DMatrix<f64>,
    pub d_theta_bar: DMatrix<f64>,
}

impl GradientPair {
    pub fn zeros(d_u: usize, d_x: usize) -> Self {
        GradientPair {
            d_theta: DMatrix::zeros(d_u, d_x),
            d_theta_bar: DMatrix::zeros(d_u, d_x),
        }
    }

    /// `[∇_θ, ∇_θ̄]` as one `d_u × 2d_x` matrix.
    pub fn concat(&self) -> DMatrix<f64> {
        let (du, dx) = self.d_theta.shape();
        let mut out = DMatrix::zeros(du, 2 * dx);
        out.view_mut((0, 0), (du, dx)).copy_from(&self.d_theta);
        out.view_mut((0, dx), (du, dx)).copy_from(&self.d_theta_bar);
        out
    }

    pub fn split(g: &DMatrix<f64>) -> Self {
        let dx = g.ncols() / 2;
        GradientPair {
            d_theta: g.columns(0, dx).into_owned(),
            d_theta_bar: g.columns(dx, dx).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.d_theta.norm_squared() + self.d_theta_bar.norm_squared()).sqrt()
    }

    pub fn as_policy(&self) -> Policy {
        Policy::new(self.d_theta.clone(), self.d_theta_bar.clone())
    }
}

/// `𝚺_𝛉`, the discounted second moment of the lifted state.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub sigma: DMatrix<f64>,
}

/// Lifted gain seen by a learner playing `learner` while everyone else plays `others`.
pub fn effective_gain(learner: &Policy, others: &Policy, n: Population) -> DMatrix<f64> {
    let a = n.weight();
    let ac = n.complement();
    let (du, dx) = learner.theta.shape();
    let mut k = DMatrix::zeros(2 * du, 2 * dx);
    k.view_mut((0, 0), (du, dx))
        .copy_from(&(&learner.theta * ac + &others.theta * a));
    k.view_mut((0, dx), (du, dx))
        .copy_from(&((&learner.theta_bar - &others.theta_bar) * ac));
    k.view_mut((du, 0), (du, dx))
        .copy_from(&((&learner.theta - &others.theta) * a));
    k.view_mut((du, dx), (du, dx))
        .copy_from(&(&learner.theta_bar * a + &others.theta_bar * ac));
    k
}

/// Discounted cost of an arbitrary lifted gain.
pub fn cost_for_gain(k: &DMatrix<f64>, m: &LiftedModel) -> Result<f64> {
    Ok(cost_from_value(&value_matrix_for_gain(k, m, LYAP_TOL)?, m))
}

/// `J(𝛉) = (1−γ)tr(M(𝛉)𝚺_x) + γ tr(M(𝛉)𝚺_w)` when every player uses `𝛉`.
pub fn policy_cost(policy: &Policy, m: &LiftedModel) -> Result<f64> {
    cost_for_gain(&policy.block(), m)
}

/// Cost of a learner deviating to `learner` while the others keep `others`.
pub fn learner_cost(learner: &Policy, others: &Policy, m: &LiftedModel) -> Result<f64> {
    cost_for_gain(&effective_gain(learner, others, m.population()), m)
}

/// Solves `𝚺 = (1−γ)𝚺_x + γ(𝐀−𝐁𝛉)𝚺(𝐀−𝐁𝛉)ᵀ + γ𝚺_w`.
pub fn discounted_covariance(policy: &Policy, m: &LiftedModel) -> Result<CovarianceMatrix> {
    let acl = policy.closed_loop(m);
    let source = &m.sigma_x * (1.0 - m.gamma) + &m.sigma_w * m.gamma;
    let sigma = discounted_lyapunov(&acl.transpose(), &source, m.gamma, LYAP_TOL)?;
    Ok(CovarianceMatrix { sigma })
}

/// Everything computed at one policy.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: ValueMatrix,
    pub covariance: CovarianceMatrix,
    pub cost: f64,
    pub gradient: GradientPair,
}

/// `𝐄_𝛉 = (𝐑 + γ𝐁ᵀM𝐁)𝛉 − γ𝐁ᵀM𝐀`.
pub fn e_matrix(policy: &Policy, value: &ValueMatrix, m: &LiftedModel) -> DMatrix<f64> {
    let bt_m = m.b.transpose() * &value.m;
    (&m.r + &bt_m * &m.b * m.gamma) * policy.block() - bt_m * &m.a * m.gamma
}

pub fn evaluate(policy: &Policy, m: &LiftedModel) -> Result<Evaluation> {
    let value = value_matrix_for_gain(&policy.block(), m, LYAP_TOL)?;
    let covariance = discounted_covariance(policy, m)?;
    let e = e_matrix(policy, &value, m);
    let g = &m.p_n * e * &covariance.sigma * 2.0;
    Ok(Evaluation {
        cost: cost_from_value(&value, m),
        gradient: GradientPair::split(&g),
        value,
        covariance,
    })
}

/// `[∇_θ J, ∇_θ̄ J] = 2𝐏_n𝐄_𝛉𝚺_𝛉`.
pub fn exact_gradient(policy: &Policy, m: &LiftedModel) -> Result<GradientPair> {
    Ok(evaluate(policy, m)?.gradient)
}

/// `𝛉 − η diag(∇_θ, ∇_θ̄)`, blockwise.
pub fn gd_step(policy: &Policy, grad: &GradientPair, eta: f64) -> Policy {
    Policy::new(
        &policy.theta - &grad.d_theta * eta,
        &policy.theta_bar - &grad.d_theta_bar * eta,
    )
}

/// `𝛉 − η [∇_θ, ∇_θ̄] 𝚺⁻¹`, split back into blocks.
pub fn npg_step(
    policy: &Policy,
    grad: &GradientPair,
    sigma: &CovarianceMatrix,
    eta: f64,
) -> Result<Policy> {
    let s = sigma_min(&sigma.sigma);
    if s < 1e-12 {
        return Err(Error::SingularCovariance(s));
    }
    let inv = symmetrize(&sigma.sigma)
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| sigma.sigma.clone().try_inverse())
        .ok_or(Error::SingularCovariance(s))?;
    let natural = GradientPair::split(&(grad.concat() * inv));
    Ok(gd_step(policy, &natural, eta))
}

/// `μ = σ_min(𝚺_x)`
pub fn mu(m: &LiftedModel) -> f64 {
    m.mu()
}

/// `‖𝐏_nᵀ𝐏_n‖`
pub fn projection_norm(m: &LiftedModel) -> f64 {
    spectral_norm(&(m.p_n.transpose() * &m.p_n))
}

/// `η = 1/(‖𝐏_nᵀ𝐏_n‖(‖𝐑‖ + γ‖𝐁‖²J₁/μ))`
pub fn npg_step_size(m: &LiftedModel, j1: f64, mu: f64) -> f64 {
    let b = spectral_norm(&m.b);
    1.0 / (projection_norm(m) * (spectral_norm(&m.r) + m.gamma * b * b * j1 / mu))
}

/// Per-iteration contraction factor `1 − ημσ_min(𝐑)/‖𝚺_𝛉*‖` for the exact NPGD step.
pub fn npg_contraction(m: &LiftedModel, eta: f64, sigma_star: &CovarianceMatrix) -> f64 {
    1.0 - eta * m.mu() * sigma_min(&m.r) / spectral_norm(&sigma_star.sigma)
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlReport {
    Evaluated {
        /// `J(𝛉) − J(𝛉*)`
        gap: f64,
        /// `L₁‖∇J‖²_F`
        bound: f64,
        constant: f64,
        holds: bool,
    },
    Inapplicable {
        reason: String,
    },
}

impl PlReport {
    pub fn holds(&self) -> Option<bool> {
        match self {
            PlReport::Evaluated { holds, .. } => Some(*holds),
            PlReport::Inapplicable { .. } => None,
        }
    }
}

/// Gradient-domination constant `L₁(𝛉*)` for the model's population.
pub fn pl_constant(nash_sigma: &CovarianceMatrix, m: &LiftedModel) -> std::result::Result<f64, String> {
    match m.population() {
        Population::Finite(n) => {
            let sr = sigma_min(&m.r);
            if sr < 1e-12 {
                return Err("inapplicable: σ_min(𝐑)=0".into());
            }
            let mu = m.mu();
            if mu <= 0.0 {
                return Err("inapplicable: μ=0".into());
            }
            let n = n as f64;
            Ok(n * n * spectral_norm(&nash_sigma.sigma) / (4.0 * mu * mu * sr))
        }
        Population::Infinite => {
            let s = &m.spec;
            let dx = s.d_x;
            let s11 = nash_sigma.sigma.view((0, 0), (dx, dx)).into_owned();
            let s22 = nash_sigma.sigma.view((dx, dx), (dx, dx)).into_owned();
            let c = sigma_min(&s.init_cov);
            let mm = sigma_min(&(&s.init_mean * s.init_mean.transpose()));
            let r = sigma_min(&s.r);
            let rs = sigma_min(&(&s.r + &s.s_u));
            if c <= 0.0 || mm <= 0.0 || r <= 0.0 || rs <= 0.0 {
                return Err("inapplicable: degenerate moment or control weight".into());
            }
            Ok(spectral_norm(&s11) / (4.0 * c * c * r) + spectral_norm(&s22) / (4.0 * mm * mm * rs))
        }
    }
}

/// Checks `J(𝛉) − J(𝛉*) ≤ L₁‖[∇_θJ, ∇_θ̄J]‖²_F` at `policy`.
pub fn pl_check(policy: &Policy, nash: &NashSolution, m: &LiftedModel) -> Result<PlReport> {
    let sigma_star = discounted_covariance(&nash.policy, m)?;
    let constant = match pl_constant(&sigma_star, m) {
        Ok(c) => c,
        Err(reason) => return Ok(PlReport::Inapplicable { reason }),
    };
    let eval = evaluate(policy, m)?;
    let j_star = cost_from_value(&nash.value, m);
    let gap = eval.cost - j_star;
    let bound = constant * eval.gradient.norm().powi(2);
    let slack = 1e-12 * (1.0 + j_star.abs());
    Ok(PlReport::Evaluated {
        gap,
        bound,
        constant,
        holds: gap <= bound + slack,
    })
}

/// `tr((𝐐 + 𝛉ᵀ𝐑𝛉)𝚺_𝛉)`, the covariance-side expression of the cost.
pub fn dual_cost(policy: &Policy, m: &LiftedModel) -> Result<f64> {
    let k = policy.block();
    let q_eff = &m.q + k.transpose() * &m.r * &k;
    Ok(trace_product(&q_eff, &discounted_covariance(policy, m)?.sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::GameSpec;
    use approx::assert_relative_eq;

    fn scalar(n: Population) -> LiftedModel {
        GameSpec::scalar(n, 0.9, 0.7, 0.4, 1.0, 4.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.4)
            .lift()
            .unwrap()
    }

    #[test]
    fn dead_beat_covariance() {
        let mut m = scalar(Population::Finite(4));
        m.a = m.b.clone() * 2.0;
        let p = Policy::scalar(2.0, 2.0);
        let c = discounted_covariance(&p, &m).unwrap();
        let expect = &m.sigma_x * 0.1 + &m.sigma_w * 0.9;
        assert_relative_eq!(c.sigma, expect, epsilon = 1e-15);
    }

    #[test]
    fn geometric_covariance() {
        let mut m = scalar(Population::Finite(4));
        m.sigma_w = DMatrix::zeros(2, 2);
        m.sigma_x = DMatrix::from_diagonal_element(2, 2, 3.0);
        let p = Policy::scalar(0.5, 0.5);
        let c = 0.7 - 0.4 * 0.5;
        let sigma = discounted_covariance(&p, &m).unwrap();
        assert_relative_eq!(sigma.sigma[(0, 0)], 0.1 * 3.0 / (1.0 - 0.9 * c * c), epsilon = 1e-13);
    }

    #[test]
    fn zero_moments_zero_cost() {
        let mut m = scalar(Population::Finite(4));
        m.sigma_x = DMatrix::zeros(2, 2);
        m.sigma_w = DMatrix::zeros(2, 2);
        assert_eq!(policy_cost(&Policy::scalar(0.3, 0.2), &m).unwrap(), 0.0);
    }

    #[test]
    fn zero_policy_cost_is_scaled_trace() {
        let mut m = scalar(Population::Finite(100));
        m.sigma_x = DMatrix::identity(2, 2);
        m.sigma_w = DMatrix::zeros(2, 2);
        let j = policy_cost(&Policy::scalar(0.0, 0.0), &m).unwrap();
        let tr = m.q.trace() / (1.0 - 0.9 * 0.49);
        assert_relative_eq!(j, 0.1 * tr, epsilon = 1e-12);
    }

    #[test]
    fn effective_gain_of_common_policy_is_block() {
        let p = Policy::scalar(0.3, 0.8);
        let k = effective_gain(&p, &p, Population::Finite(7));
        assert_relative_eq!(k, p.block(), epsilon = 1e-16);
    }

    #[test]
    fn zero_discount_gradient() {
        let mut m = scalar(Population::Finite(2));
        m.gamma = 0.0;
        let p = Policy::scalar(0.5, 0.25);
        let g = exact_gradient(&p, &m).unwrap();
        let expect = &m.p_n * (&m.r * p.block()) * &m.sigma_x * 2.0;
        assert_relative_eq!(g.concat(), expect, epsilon = 1e-14);
    }

    #[test]
    fn gd_step_arithmetic() {
        let p = Policy::scalar(1.0, 0.5);
        let g = GradientPair::split(&DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        assert_eq!(gd_step(&p, &g, 0.1).theta[(0, 0)], 0.8);
        assert_eq!(gd_step(&p, &g, 0.0), p);
        assert_eq!(gd_step(&p, &GradientPair::zeros(1, 1), 0.3), p);
    }

    #[test]
    fn npg_step_arithmetic() {
        let p = Policy::scalar(0.0, 0.0);
        let g = GradientPair::split(&DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        let s = CovarianceMatrix {
            sigma: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0])),
        };
        let next = npg_step(&p, &g, &s, 1.0).unwrap();
        assert_relative_eq!(next.theta[(0, 0)], -0.5, epsilon = 1e-15);
        assert_eq!(next.theta_bar[(0, 0)], 0.0);
        let eye = CovarianceMatrix { sigma: DMatrix::identity(2, 2) };
        assert_eq!(npg_step(&p, &g, &eye, 0.3).unwrap(), gd_step(&p, &g, 0.3));
    }

    #[test]
    fn npg_step_rejects_singular_covariance() {
        let s = CovarianceMatrix { sigma: DMatrix::zeros(2, 2) };
        let r = npg_step(&Policy::scalar(0.0, 0.0), &GradientPair::zeros(1, 1), &s, 1.0);
        assert!(matches!(r, Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn projection_norm_limits() {
        assert_relative_eq!(projection_norm(&scalar(Population::Finite(1))), 1.0, epsilon = 1e-15);
        assert_relative_eq!(projection_norm(&scalar(Population::Infinite)), 1.0, epsilon = 1e-15);
        assert_relative_eq!(projection_norm(&scalar(Population::Finite(2))), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_discount_step_size() {
        let mut m = scalar(Population::Finite(3));
        m.gamma = 0.0;
        let eta = npg_step_size(&m, 5.0, 0.1);
        assert_relative_eq!(eta, 1.0 / (projection_norm(&m) * 2.0), epsilon = 1e-14);
    }

    #[test]
    fn singular_r_makes_pl_inapplicable() {
        let m = scalar(Population::Finite(100));
        let sol = crate::riccati::solve_nash(&m, &Default::default()).unwrap();
        let r = pl_check(&sol.policy, &sol, &m).unwrap();
        match r {
            PlReport::Inapplicable { reason } => assert_eq!(reason, "inapplicable: σ_min(𝐑)=0"),
            other => panic!("{other:?}"),
        }
    }
}
