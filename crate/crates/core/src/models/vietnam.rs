//! Semi-synthetic draft-lottery environment with a binary instrument `Z`,
//! binary treatment `X` and continuous outcome `Y`, estimated by the Wald
//! ratio from disjoint `{Z, X}` and `{Z, Y}` sources.
//!
//! `Z ~ Bernoulli(μz)`, `X = 1(αZ + c* + εx > 0)`,
//! `Y = βX + γ + c0·εx + εy`, `θ = [μ1, μ0, τ1, τ0]`,
//! `f_tar(θ) = (μ1 − μ0)/(τ1 − τ0)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{Sampler, Scm, ScmSpec};
use crate::error::Result;
use crate::model::{DataSourceSet, MomentModel, MomentSystem, Monomial, ThetaBox, VarId};
use crate::rng::NoiseStreams;

const Z: VarId = 0;
const X: VarId = 1;
const Y: VarId = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VietnamParams {
    pub mu_z: f64,
    pub alpha: f64,
    pub c_star: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c0: f64,
    /// `σ²_εy`; `None` solves `Var(Y) = 1` from the other constants.
    pub sigma2_eps_y: Option<f64>,
}

impl Default for VietnamParams {
    fn default() -> Self {
        VietnamParams {
            mu_z: 0.3424,
            alpha: 0.4766,
            c_star: -1.0502,
            beta: -0.4313,
            gamma: 0.0834,
            c0: 0.5,
            sigma2_eps_y: None,
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

impl VietnamParams {
    /// `(τ1, τ0) = (P(X=1|Z=1), P(X=1|Z=0))`.
    pub fn compliance(&self) -> (f64, f64) {
        let n = std_normal();
        (n.cdf(self.alpha + self.c_star), n.cdf(self.c_star))
    }

    /// `Var(Y)` excluding `σ²_εy`:
    /// `β²Var(X) + c0² + 2βc0·E[X·εx]`.
    pub fn var_y_without_eps(&self) -> f64 {
        let n = std_normal();
        let (t1, t0) = self.compliance();
        let px = self.mu_z * t1 + (1.0 - self.mu_z) * t0;
        let var_x = px * (1.0 - px);
        let e_x_eps =
            self.mu_z * n.pdf(self.alpha + self.c_star) + (1.0 - self.mu_z) * n.pdf(self.c_star);
        self.beta * self.beta * var_x + self.c0 * self.c0 + 2.0 * self.beta * self.c0 * e_x_eps
    }

    pub fn resolved_sigma2_eps_y(&self) -> f64 {
        self.sigma2_eps_y
            .unwrap_or_else(|| 1.0 - self.var_y_without_eps())
    }

    pub fn true_theta(&self) -> Vec<f64> {
        let (t1, t0) = self.compliance();
        vec![
            self.beta * t1 + self.gamma,
            self.beta * t0 + self.gamma,
            t1,
            t0,
        ]
    }
}

struct VietnamMoments {
    rows: Vec<Vec<VarId>>,
    monos: Vec<Monomial>,
}

impl MomentSystem for VietnamMoments {
    fn n_params(&self) -> usize {
        4
    }

    fn row_variables(&self) -> &[Vec<VarId>] {
        &self.rows
    }

    fn moment(&self, row: usize, th: &[f64], x: &[f64]) -> f64 {
        let z = x[Z];
        match row {
            0 => z * (x[Y] - th[0]),
            1 => (1.0 - z) * (x[Y] - th[1]),
            2 => z * (x[X] - th[2]),
            _ => (1.0 - z) * (x[X] - th[3]),
        }
    }

    fn jacobian_row(&self, row: usize, _th: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let z = x[Z];
        out[row] = if row.is_multiple_of(2) { -z } else { -(1.0 - z) };
    }

    fn target(&self, th: &[f64]) -> Option<f64> {
        let den = th[2] - th[3];
        if den == 0.0 {
            return None;
        }
        Some((th[0] - th[1]) / den)
    }

    fn target_gradient(&self, th: &[f64], out: &mut [f64]) -> bool {
        let den = th[2] - th[3];
        if den == 0.0 {
            return false;
        }
        let num = th[0] - th[1];
        out[0] = 1.0 / den;
        out[1] = -1.0 / den;
        out[2] = -num / (den * den);
        out[3] = num / (den * den);
        true
    }

    fn monomials(&self) -> &[Monomial] {
        &self.monos
    }

    fn coefficients(&self, th: &[f64], c: &mut [f64]) {
        // monomials: ZY, Z, Y, 1, ZX, X
        #[rustfmt::skip]
        let rows: [[f64; 6]; 4] = [
            [1.0, -th[0], 0.0, 0.0, 0.0, 0.0],
            [-1.0, th[1], 1.0, -th[1], 0.0, 0.0],
            [0.0, -th[2], 0.0, 0.0, 1.0, 0.0],
            [0.0, th[3], 0.0, -th[3], -1.0, 1.0],
        ];
        for (j, r) in rows.iter().enumerate() {
            c[j * 6..(j + 1) * 6].copy_from_slice(r);
        }
    }
}

struct VietnamSampler {
    p: VietnamParams,
    sigma_eps_y: f64,
}

impl Sampler for VietnamSampler {
    fn n_equations(&self) -> usize {
        3
    }

    fn draw(&self, s: &mut NoiseStreams, out: &mut [f64]) {
        let p = &self.p;
        let z = if s.eq(0).random::<f64>() < p.mu_z { 1.0 } else { 0.0 };
        let ex: f64 = StandardNormal.sample(s.eq(1));
        let ey: f64 = StandardNormal.sample(s.eq(2));
        let x = if p.alpha * z + p.c_star + ex > 0.0 { 1.0 } else { 0.0 };
        out[Z] = z;
        out[X] = x;
        out[Y] = p.beta * x + p.gamma + p.c0 * ex + self.sigma_eps_y * ey;
    }
}

pub fn build(p: VietnamParams) -> Result<Scm> {
    let sources = DataSourceSet::new(
        &["Z", "X", "Y"],
        &[("ZX", &["Z", "X"], 1.0), ("ZY", &["Z", "Y"], 1.0)],
    )?;
    let system = VietnamMoments {
        rows: vec![vec![Z, Y], vec![Z, Y], vec![Z, X], vec![Z, X]],
        monos: vec![vec![Z, Y], vec![Z], vec![Y], vec![], vec![Z, X], vec![X]],
    };
    // Outcome moments are computable only from the {Z, Y} source and
    // treatment moments only from {Z, X}.
    let model = MomentModel::new(
        "vietnam",
        &["mu1", "mu0", "tau1", "tau0"],
        sources,
        vec![
            vec![false, false, true, true],
            vec![true, true, false, false],
        ],
        ThetaBox::standard(4, &[]),
        Arc::new(system),
    )?;
    let s2 = p.resolved_sigma2_eps_y();
    let theta = p.true_theta();
    let beta = (theta[0] - theta[1]) / (theta[2] - theta[3]);
    let spec = ScmSpec {
        name: "vietnam".into(),
        params: vec![
            ("mu_z".into(), p.mu_z),
            ("alpha".into(), p.alpha),
            ("c_star".into(), p.c_star),
            ("beta".into(), p.beta),
            ("gamma".into(), p.gamma),
            ("c0".into(), p.c0),
            ("sigma2_eps_y".into(), s2),
        ],
        true_theta: theta,
        true_beta: beta,
        noise: vec![
            "Z ~ Bernoulli(mu_z)".into(),
            "eps_x ~ N(0, 1)".into(),
            "eps_y ~ N(0, sigma2_eps_y)".into(),
        ],
    };
    Ok(Scm::new(
        spec,
        model,
        Arc::new(VietnamSampler {
            p,
            sigma_eps_y: s2.sqrt(),
        }),
        None,
    )
    .with_metadata("sigma2_eps_y_solved_for_unit_var_y", p.sigma2_eps_y.is_none().into()))
}
