//! Raw game description, standing-assumption checks and the lift to
//! gauge-transformed coordinates `𝐱 = (x − x̄, x̄)`.

use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{block2, block_diag, max_asymmetry, min_eigenvalue, sigma_min};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-12;

/// Number of players. `Infinite` is the exact mean-field limit, not a large integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Finite(usize),
    Infinite,
}

impl Population {
    /// Homogeneous weight `1/n`; exactly zero in the limit.
    pub fn weight(self) -> f64 {
        match self {
            Population::Finite(n) => 1.0 / n as f64,
            Population::Infinite => 0.0,
        }
    }

    /// `1 − 1/n`; exactly one in the limit.
    pub fn complement(self) -> f64 {
        match self {
            Population::Finite(n) => 1.0 - 1.0 / n as f64,
            Population::Infinite => 1.0,
        }
    }

    pub fn finite(self) -> Option<usize> {
        match self {
            Population::Finite(n) => Some(n),
            Population::Infinite => None,
        }
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Finite(n) => write!(f, "{n}"),
            Population::Infinite => write!(f, "infinite"),
        }
    }
}

impl std::str::FromStr for Population {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("infinite") || s.eq_ignore_ascii_case("inf") {
            return Ok(Population::Infinite);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Population::Finite(n)),
            _ => Err(Error::Config(format!(
                "n must be a positive integer or \"infinite\", got {s:?}"
            ))),
        }
    }
}

impl Serialize for Population {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Population::Finite(n) => s.serialize_u64(*n as u64),
            Population::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for Population {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) if n > 0 => Ok(Population::Finite(n as usize)),
            Raw::Int(n) => Err(serde::de::Error::custom(format!(
                "n must be positive, got {n}"
            ))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Raw model parameters with homogeneous weights `αⁱ = 1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub d_x: usize,
    pub d_u: usize,
    pub n: Population,
    pub gamma: f64,
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s_x: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s_u: DMatrix<f64>,
    pub r_bar: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn warnings(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Warn)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, ok: bool, detail: String) {
        let status = if ok { CheckStatus::Pass } else { CheckStatus::Warn };
        self.checks.push(AssumptionCheck { name, status, detail });
    }
}

impl GameSpec {
    /// A scalar game (`d_x = d_u = 1`) with `Ā = B̄ = 0`, the shape of every bundled preset.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        n: Population,
        gamma: f64,
        a: f64,
        b: f64,
        q: f64,
        s_x: f64,
        q_bar: f64,
        r: f64,
        s_u: f64,
        r_bar: f64,
        init_mean: f64,
        init_var: f64,
        noise_var: f64,
    ) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        GameSpec {
            d_x: 1,
            d_u: 1,
            n,
            gamma,
            a: m(a),
            a_bar: m(0.0),
            b: m(b),
            b_bar: m(0.0),
            q: m(q),
            s_x: m(s_x),
            q_bar: m(q_bar),
            r: m(r),
            s_u: m(s_u),
            r_bar: m(r_bar),
            init_mean: DVector::from_element(1, init_mean),
            init_cov: m(init_var),
            noise_cov: m(noise_var),
        }
    }

    pub fn with_population(&self, n: Population) -> Self {
        GameSpec { n, ..self.clone() }
    }

    fn check_dims(&self) -> Result<()> {
        let (dx, du) = (self.d_x, self.d_u);
        if dx == 0 || du == 0 {
            return Err(Error::Dimension("d_x and d_u must be positive".into()));
        }
        let expect = [
            ("A", &self.a, dx, dx),
            ("A_bar", &self.a_bar, dx, dx),
            ("B", &self.b, dx, du),
            ("B_bar", &self.b_bar, dx, du),
            ("Q", &self.q, dx, dx),
            ("S_x", &self.s_x, dx, dx),
            ("Q_bar", &self.q_bar, dx, dx),
            ("R", &self.r, du, du),
            ("S_u", &self.s_u, du, du),
            ("R_bar", &self.r_bar, du, du),
            ("init_cov", &self.init_cov, dx, dx),
            ("noise_cov", &self.noise_cov, dx, dx),
        ];
        for (name, m, r, c) in expect {
            if m.shape() != (r, c) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if self.init_mean.len() != dx {
            return Err(Error::Dimension(format!(
                "init_mean has length {}, expected {dx}",
                self.init_mean.len()
            )));
        }
        Ok(())
    }

    /// Hard errors for malformed input; warnings for violated standing assumptions.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.check_dims()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Discount(self.gamma));
        }
        let mut report = ValidationReport::default();

        let symmetric = [
            ("Q", &self.q),
            ("S_x", &self.s_x),
            ("Q_bar", &self.q_bar),
            ("R", &self.r),
            ("S_u", &self.s_u),
            ("R_bar", &self.r_bar),
            ("init_cov", &self.init_cov),
            ("noise_cov", &self.noise_cov),
        ];
        for (name, m) in symmetric {
            let asym = max_asymmetry(m);
            if asym > SYMMETRY_TOL {
                return Err(Error::NotSymmetric {
                    name,
                    asymmetry: asym,
                });
            }
        }
        report.push("symmetry", true, "cost and covariance matrices symmetric".into());

        for (name, m) in [("init_cov", &self.init_cov), ("noise_cov", &self.noise_cov)] {
            let lo = min_eigenvalue(m);
            if lo < -PSD_TOL {
                return Err(Error::NotPsd {
                    name,
                    min_eigenvalue: lo,
                });
            }
        }
        report.push("covariance psd", true, "init_cov and noise_cov PSD".into());

        let lifted = self.lift_unchecked();
        match self.n {
            Population::Finite(_) => {
                pd_check(&mut report, "Q_blk positive definite", "Q_blk", &lifted.q);
                pd_check(&mut report, "R_blk positive definite", "R_blk", &lifted.r);
            }
            Population::Infinite => {
                pd_check(&mut report, "Q positive definite", "Q", &self.q);
                pd_check(&mut report, "Q+S_x positive definite", "Q+S_x", &(&self.q + &self.s_x));
                pd_check(&mut report, "R positive definite", "R", &self.r);
                pd_check(&mut report, "R+S_u positive definite", "R+S_u", &(&self.r + &self.s_u));
                let decoupled = self.a_bar.amax() == 0.0 && self.b_bar.amax() == 0.0;
                report.push(
                    "mean-field decoupling",
                    decoupled,
                    if decoupled {
                        "A_bar = B_bar = 0".into()
                    } else {
                        "A_bar or B_bar nonzero: decoupled Riccati pair does not apply".into()
                    },
                );
            }
        }

        let mu = sigma_min(&lifted.sigma_x);
        report.push(
            "initial moment positive definite",
            mu > 0.0,
            format!("sigma_min(Sigma_x) = {mu:e}"),
        );

        let ab = stabilizable(&self.a, &self.b);
        let ab_mean = stabilizable(&(&self.a + &self.a_bar), &(&self.b + &self.b_bar));
        report.push(
            "stabilizable",
            ab && ab_mean,
            format!("(A, B): {ab}; (A+A_bar, B+B_bar): {ab_mean}"),
        );
        Ok(report)
    }

    pub fn lift(&self) -> Result<LiftedModel> {
        self.validate()?;
        Ok(self.lift_unchecked())
    }

    fn lift_unchecked(&self) -> LiftedModel {
        let (dx, du) = (self.d_x, self.d_u);
        let w = self.n.weight();
        let wc = self.n.complement();
        let q_sx = &self.q + &self.s_x;
        let r_su = &self.r + &self.s_u;
        let q_blk = block2(
            &self.q,
            &q_sx,
            &q_sx,
            &(&self.q + &self.s_x * 2.0 + &self.q_bar),
        );
        let r_blk = block2(
            &self.r,
            &r_su,
            &r_su,
            &(&self.r + &self.s_u * 2.0 + &self.r_bar),
        );
        let eye_u = DMatrix::<f64>::identity(du, du);
        let mut p_n = DMatrix::zeros(du, 2 * du);
        p_n.view_mut((0, 0), (du, du)).copy_from(&(&eye_u * wc));
        p_n.view_mut((0, du), (du, du)).copy_from(&(&eye_u * w));
        let p_tilde_n = block_diag(&(&eye_u * wc), &(&eye_u * w));
        let mean_outer = &self.init_mean * self.init_mean.transpose();
        let sigma_x = block_diag(&(&self.init_cov * wc), &(&self.init_cov * w + mean_outer));
        let sigma_w = block_diag(&(&self.noise_cov * wc), &(&self.noise_cov * w));
        debug_assert_eq!(sigma_x.nrows(), 2 * dx);
        LiftedModel {
            spec: self.clone(),
            gamma: self.gamma,
            a: block_diag(&self.a, &(&self.a + &self.a_bar)),
            b: block_diag(&self.b, &(&self.b + &self.b_bar)),
            q: q_blk,
            r: r_blk,
            p_n,
            p_tilde_n,
            sigma_x,
            sigma_w,
        }
    }
}

fn pd_check(report: &mut ValidationReport, check: &'static str, label: &str, m: &DMatrix<f64>) {
    let lo = min_eigenvalue(m);
    let detail = if lo > 0.0 {
        format!("{label} min eigenvalue = {lo:e}")
    } else if sigma_min(m) < 1e-12 {
        format!("{label} singular: σ_min = 0")
    } else {
        format!("{label} indefinite: min eigenvalue = {lo:e}")
    };
    report.push(check, lo > 0.0, detail);
}

/// PBH test: `rank [A − λI, B] = d_x` for every eigenvalue with `|λ| ≥ 1`.
fn stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let dx = a.nrows();
    let ac = a.map(|v| Complex::new(v, 0.0));
    let bc = b.map(|v| Complex::new(v, 0.0));
    a.complex_eigenvalues().iter().all(|lam| {
        if lam.norm() < 1.0 {
            return true;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(dx, dx + b.ncols());
        pbh.view_mut((0, 0), (dx, dx))
            .copy_from(&(&ac - DMatrix::<Complex<f64>>::identity(dx, dx) * *lam));
        pbh.view_mut((0, dx), (dx, b.ncols())).copy_from(&bc);
        let sv = pbh.singular_values();
        let scale = sv.max().max(1.0);
        sv.iter().filter(|s| **s > 1e-10 * scale).count() == dx
    })
}

/// Gauge-transformed system. Every solver works in these `2d_x`-dimensional coordinates.
#[derive(Debug, Clone)]
pub struct LiftedModel {
    pub spec: GameSpec,
    pub gamma: f64,
    /// `diag(A, A+Ā)`
    pub a: DMatrix<f64>,
    /// `diag(B, B+B̄)`
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `[(1−1/n)I, (1/n)I]`
    pub p_n: DMatrix<f64>,
    /// `diag((1−1/n)I, (1/n)I)`
    pub p_tilde_n: DMatrix<f64>,
    /// Lifted initial second moment.
    pub sigma_x: DMatrix<f64>,
    /// Lifted noise second moment.
    pub sigma_w: DMatrix<f64>,
}

impl LiftedModel {
    pub fn d_x(&self) -> usize {
        self.spec.d_x
    }

    pub fn d_u(&self) -> usize {
        self.spec.d_u
    }

    pub fn population(&self) -> Population {
        self.spec.n
    }

    /// `μ = σ_min(E[𝐱₁𝐱₁ᵀ])`.
    pub fn mu(&self) -> f64 {
        sigma_min(&self.sigma_x)
    }
}

/// A lifted vector `(x − x̄, x̄)`, always concatenated in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedVector {
    pub delta: DVector<f64>,
    pub mean: DVector<f64>,
}

impl LiftedVector {
    pub fn zeros(d: usize) -> Self {
        LiftedVector {
            delta: DVector::zeros(d),
            mean: DVector::zeros(d),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let d = self.delta.len();
        DVector::from_fn(2 * d, |i, _| {
            if i < d {
                self.delta[i]
            } else {
                self.mean[i - d]
            }
        })
    }

    pub fn from_stacked(v: &DVector<f64>) -> Self {
        let d = v.len() / 2;
        LiftedVector {
            delta: v.rows(0, d).into_owned(),
            mean: v.rows(d, d).into_owned(),
        }
    }

    /// The raw vector of the player this lift was taken from.
    pub fn reconstruct(&self) -> DVector<f64> {
        &self.delta + &self.mean
    }
}

fn average(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    acc / vs.len() as f64
}

/// Gauge transform of the `learner`'s state and action (0-based index).
pub fn gauge_transform(
    states: &[DVector<f64>],
    actions: &[DVector<f64>],
    learner: usize,
) -> Result<(LiftedVector, LiftedVector)> {
    if states.is_empty() || states.len() != actions.len() {
        return Err(Error::Dimension(format!(
            "{} states vs {} actions",
            states.len(),
            actions.len()
        )));
    }
    if learner >= states.len() {
        return Err(Error::Dimension(format!(
            "learner index {learner} out of range for {} players",
            states.len()
        )));
    }
    let x_bar = average(states);
    let u_bar = average(actions);
    Ok((
        LiftedVector {
            delta: &states[learner] - &x_bar,
            mean: x_bar,
        },
        LiftedVector {
            delta: &actions[learner] - &u_bar,
            mean: u_bar,
        },
    ))
}

/// `𝐱ᵀ𝐐𝐱 + 𝐮ᵀ𝐑𝐮`.
pub fn per_step_cost(x: &LiftedVector, u: &LiftedVector, m: &LiftedModel) -> f64 {
    let xs = x.stacked();
    let us = u.stacked();
    (xs.transpose() * &m.q * &xs)[(0, 0)] + (us.transpose() * &m.r * &us)[(0, 0)]
}

/// Per-step cost of `player` in the original coordinates.
pub fn raw_cost(
    spec: &GameSpec,
    states: &[DVector<f64>],
    actions: &[DVector<f64>],
    player: usize,
) -> f64 {
    let x = &states[player];
    let u = &actions[player];
    let xb = average(states);
    let ub = average(actions);
    let quad = |a: &DVector<f64>, m: &DMatrix<f64>, b: &DVector<f64>| (a.transpose() * m * b)[(0, 0)];
    quad(x, &spec.q, x) + 2.0 * quad(x, &spec.s_x, &xb) + quad(&xb, &spec.q_bar, &xb)
        + quad(u, &spec.r, u)
        + 2.0 * quad(u, &spec.s_u, &ub)
        + quad(&ub, &spec.r_bar, &ub)
}
