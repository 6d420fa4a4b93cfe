#![allow(dead_code)]

use dsg_core::linalg::spectral_radius;
use dsg_core::{GameConfig, GameSpec, LiftedModel, Policy, Population};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Gen(ChaCha8Rng);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on `[-1, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    pub fn below(&mut self, k: usize) -> usize {
        (self.0.next_u64() % k as u64) as usize
    }

    pub fn matrix(&mut self, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| self.unit())
    }

    pub fn vector(&mut self, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| self.unit())
    }

    pub fn psd(&mut self, d: usize, shift: f64) -> DMatrix<f64> {
        let l = self.matrix(d, d);
        &l * l.transpose() * 0.5 + DMatrix::identity(d, d) * shift
    }

    pub fn sym(&mut self, d: usize, scale: f64) -> DMatrix<f64> {
        let s = self.matrix(d, d);
        (&s + s.transpose()) * (0.5 * scale)
    }
}

/// A game whose zero policy is stable, with positive definite `Q`, `R`.
pub fn random_game(g: &mut Gen, n: Population) -> GameSpec {
    let d_x = 1 + g.below(3);
    let d_u = 1 + g.below(3);
    let mut a = g.matrix(d_x, d_x);
    let mut a_bar = g.matrix(d_x, d_x) * 0.3;
    let radius = spectral_radius(&a).max(spectral_radius(&(&a + &a_bar)));
    let target = 0.3 + 0.6 * (g.unit() + 1.0) / 2.0;
    if radius > 0.0 {
        a *= target / radius;
        a_bar *= target / radius;
    }
    GameSpec {
        d_x,
        d_u,
        n,
        gamma: 0.5 + 0.45 * (g.unit() + 1.0) / 2.0,
        a,
        a_bar,
        b: g.matrix(d_x, d_u),
        b_bar: g.matrix(d_x, d_u) * 0.3,
        q: g.psd(d_x, 0.5),
        s_x: g.sym(d_x, 0.5),
        q_bar: g.psd(d_x, 0.0),
        r: g.psd(d_u, 0.5),
        s_u: g.sym(d_u, 0.2),
        r_bar: g.psd(d_u, 0.0),
        init_mean: g.vector(d_x),
        init_cov: g.psd(d_x, 0.1),
        noise_cov: g.psd(d_x, 0.05),
    }
}

/// A random policy with `√γ ρ(𝐀−𝐁𝛉) ≤ 0.95`, found by shrinking toward zero.
pub fn random_stable_policy(g: &mut Gen, m: &LiftedModel, scale: f64) -> Policy {
    let (du, dx) = (m.d_u(), m.d_x());
    let mut p = Policy::new(g.matrix(du, dx) * scale, g.matrix(du, dx) * scale);
    while m.gamma.sqrt() * p.spectral_radius(m) > 0.95 {
        p = Policy::new(&p.theta * 0.5, &p.theta_bar * 0.5);
    }
    p
}

pub fn preset(name: &str) -> (GameSpec, LiftedModel) {
    let spec = GameConfig::preset(name).unwrap().game;
    let m = spec.lift().unwrap();
    (spec, m)
}

pub const POPULATIONS: [Population; 3] = [Population::Finite(2), Population::Finite(10), Population::Infinite];

/// Exact `(1−γ)Σ_{t<T} γ^t E[𝐱ᵀ(𝐐+𝐊ᵀ𝐑𝐊)𝐱]` by propagating the lifted second moment.
pub fn truncated_cost(k: &DMatrix<f64>, m: &LiftedModel, horizon: usize) -> f64 {
    let acl = &m.a - &m.b * k;
    let q_eff = &m.q + k.transpose() * &m.r * k;
    let mut x = m.sigma_x.clone();
    let mut w = 1.0 - m.gamma;
    let mut acc = 0.0;
    for _ in 0..horizon {
        acc += w * (&q_eff * &x).trace();
        x = &acl * &x * acl.transpose() + &m.sigma_w;
        w *= m.gamma;
    }
    acc
}
