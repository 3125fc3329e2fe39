//! Linear instrumental-variable model with disjoint `{Z, X}` and `{Z, Y}`
//! sources.
//!
//! `Z ~ N(0, σz²)`, `U ~ N(0, σu²)`, `X = αZ + γU + εx`, `Y = βX + φU + εy`,
//! `θ = [β, α]`, `g̃ = [Z(X − αZ), Z(Y − αβZ)]`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::{Sampler, Scm, ScmSpec};
use crate::error::Result;
use crate::model::{DataSourceSet, MomentModel, MomentSystem, Monomial, ThetaBox, VarId};
use crate::rng::NoiseStreams;
use crate::variance::PluginMatrices;

const Z: VarId = 0;
const X: VarId = 1;
const Y: VarId = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvParams {
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub phi: f64,
    pub sigma_z: f64,
    pub sigma_u: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl Default for IvParams {
    fn default() -> Self {
        IvParams {
            beta: 1.0,
            alpha: 1.0,
            gamma: 1.0,
            phi: 1.0,
            sigma_z: 1.0,
            sigma_u: 1.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
        }
    }
}

struct IvMoments {
    rows: Vec<Vec<VarId>>,
    monos: Vec<Monomial>,
}

impl MomentSystem for IvMoments {
    fn n_params(&self) -> usize {
        2
    }

    fn row_variables(&self) -> &[Vec<VarId>] {
        &self.rows
    }

    fn moment(&self, row: usize, th: &[f64], x: &[f64]) -> f64 {
        let (b, a) = (th[0], th[1]);
        match row {
            0 => x[Z] * (x[X] - a * x[Z]),
            _ => x[Z] * (x[Y] - a * b * x[Z]),
        }
    }

    fn jacobian_row(&self, row: usize, th: &[f64], x: &[f64], out: &mut [f64]) {
        let (b, a) = (th[0], th[1]);
        let zz = x[Z] * x[Z];
        match row {
            0 => {
                out[0] = 0.0;
                out[1] = -zz;
            }
            _ => {
                out[0] = -a * zz;
                out[1] = -b * zz;
            }
        }
    }

    fn target(&self, th: &[f64]) -> Option<f64> {
        Some(th[0])
    }

    fn target_gradient(&self, _th: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0;
        out[1] = 0.0;
        true
    }

    fn monomials(&self) -> &[Monomial] {
        &self.monos
    }

    fn coefficients(&self, th: &[f64], c: &mut [f64]) {
        let (b, a) = (th[0], th[1]);
        // monomials: ZX, ZZ, ZY
        c.copy_from_slice(&[1.0, -a, 0.0, 0.0, -a * b, 1.0]);
    }
}

struct IvSampler(IvParams);

impl Sampler for IvSampler {
    fn n_equations(&self) -> usize {
        4
    }

    fn draw(&self, s: &mut NoiseStreams, out: &mut [f64]) {
        let p = &self.0;
        let n = |s: &mut NoiseStreams, eq: usize| -> f64 { StandardNormal.sample(s.eq(eq)) };
        let z = p.sigma_z * n(s, 0);
        let u = p.sigma_u * n(s, 1);
        let x = p.alpha * z + p.gamma * u + p.sigma_x * n(s, 2);
        let y = p.beta * x + p.phi * u + p.sigma_y * n(s, 3);
        out[Z] = z;
        out[X] = x;
        out[Y] = y;
    }
}

/// Population `G` and `Ω` at the true parameters.
pub fn analytic_plugins(p: &IvParams) -> PluginMatrices {
    let vz = p.sigma_z * p.sigma_z;
    let vu = p.sigma_u * p.sigma_u;
    let vx = p.sigma_x * p.sigma_x;
    let vy = p.sigma_y * p.sigma_y;
    // X − αZ = γU + εx;  Y − αβZ = (βγ + φ)U + βεx + εy
    let k = p.beta * p.gamma + p.phi;
    let o11 = vz * (p.gamma * p.gamma * vu + vx);
    let o22 = vz * (k * k * vu + p.beta * p.beta * vx + vy);
    let o12 = vz * (p.gamma * k * vu + p.beta * vx);
    PluginMatrices::analytic(
        DMatrix::from_row_slice(2, 2, &[0.0, -vz, -p.alpha * vz, -p.beta * vz]),
        DMatrix::from_row_slice(2, 2, &[o11, o12, o12, o22]),
    )
}

pub fn build(p: IvParams) -> Result<Scm> {
    let sources = DataSourceSet::new(
        &["Z", "X", "Y"],
        &[("ZX", &["Z", "X"], 1.0), ("ZY", &["Z", "Y"], 1.0)],
    )?;
    let system = IvMoments {
        rows: vec![vec![Z, X], vec![Z, Y]],
        monos: vec![vec![Z, X], vec![Z, Z], vec![Z, Y]],
    };
    let model = MomentModel::new(
        "iv",
        &["beta", "alpha"],
        sources,
        vec![vec![true, false], vec![false, true]],
        ThetaBox::standard(2, &[]),
        Arc::new(system),
    )?;
    let spec = ScmSpec {
        name: "iv".into(),
        params: vec![
            ("beta".into(), p.beta),
            ("alpha".into(), p.alpha),
            ("gamma".into(), p.gamma),
            ("phi".into(), p.phi),
            ("sigma_z".into(), p.sigma_z),
            ("sigma_u".into(), p.sigma_u),
            ("sigma_x".into(), p.sigma_x),
            ("sigma_y".into(), p.sigma_y),
        ],
        true_theta: vec![p.beta, p.alpha],
        true_beta: p.beta,
        noise: vec![
            "Z ~ N(0, sigma_z^2)".into(),
            "U ~ N(0, sigma_u^2)".into(),
            "eps_x ~ N(0, sigma_x^2)".into(),
            "eps_y ~ N(0, sigma_y^2)".into(),
        ],
    };
    Ok(Scm::new(spec, model, Arc::new(IvSampler(p)), Some(analytic_plugins(&p))))
}
