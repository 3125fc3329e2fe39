//! Two independent instruments observed by different sources.
//!
//! `X = α1 Z1 + α2 Z2 + γU + εx`, `Y = βX + φU + εy`, `θ = [β]`,
//! `g̃ = [Z1(Y − βX), Z2(Y − βX)]`. The stronger instrument's source is the
//! oracle choice, so `κ*` sits on a corner of the simplex.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::{Sampler, Scm, ScmSpec};
use crate::error::Result;
use crate::model::{DataSourceSet, MomentModel, MomentSystem, Monomial, ThetaBox, VarId};
use crate::rng::NoiseStreams;
use crate::variance::PluginMatrices;

const Z1: VarId = 0;
const Z2: VarId = 1;
const X: VarId = 2;
const Y: VarId = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoIvParams {
    pub beta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma: f64,
    pub phi: f64,
    pub sigma_z1: f64,
    pub sigma_z2: f64,
    pub sigma_u: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl Default for TwoIvParams {
    /// Unit parameters except `α1 = 0.7`: with equal instrument strengths
    /// every selection ratio has the same variance.
    fn default() -> Self {
        TwoIvParams {
            beta: 1.0,
            alpha1: 0.7,
            alpha2: 1.0,
            gamma: 1.0,
            phi: 1.0,
            sigma_z1: 1.0,
            sigma_z2: 1.0,
            sigma_u: 1.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
        }
    }
}

struct TwoIvMoments {
    rows: Vec<Vec<VarId>>,
    monos: Vec<Monomial>,
}

impl MomentSystem for TwoIvMoments {
    fn n_params(&self) -> usize {
        1
    }

    fn row_variables(&self) -> &[Vec<VarId>] {
        &self.rows
    }

    fn moment(&self, row: usize, th: &[f64], x: &[f64]) -> f64 {
        let z = if row == 0 { x[Z1] } else { x[Z2] };
        z * (x[Y] - th[0] * x[X])
    }

    fn jacobian_row(&self, row: usize, _th: &[f64], x: &[f64], out: &mut [f64]) {
        let z = if row == 0 { x[Z1] } else { x[Z2] };
        out[0] = -z * x[X];
    }

    fn target(&self, th: &[f64]) -> Option<f64> {
        Some(th[0])
    }

    fn target_gradient(&self, _th: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0;
        true
    }

    fn monomials(&self) -> &[Monomial] {
        &self.monos
    }

    fn coefficients(&self, th: &[f64], c: &mut [f64]) {
        let b = th[0];
        // monomials: Z1Y, Z1X, Z2Y, Z2X
        c.copy_from_slice(&[1.0, -b, 0.0, 0.0, 0.0, 0.0, 1.0, -b]);
    }
}

struct TwoIvSampler(TwoIvParams);

impl Sampler for TwoIvSampler {
    fn n_equations(&self) -> usize {
        5
    }

    fn draw(&self, s: &mut NoiseStreams, out: &mut [f64]) {
        let p = &self.0;
        let n = |s: &mut NoiseStreams, eq: usize| -> f64 { StandardNormal.sample(s.eq(eq)) };
        let z1 = p.sigma_z1 * n(s, 0);
        let z2 = p.sigma_z2 * n(s, 1);
        let u = p.sigma_u * n(s, 2);
        let x = p.alpha1 * z1 + p.alpha2 * z2 + p.gamma * u + p.sigma_x * n(s, 3);
        let y = p.beta * x + p.phi * u + p.sigma_y * n(s, 4);
        out[Z1] = z1;
        out[Z2] = z2;
        out[X] = x;
        out[Y] = y;
    }
}

pub fn analytic_plugins(p: &TwoIvParams) -> PluginMatrices {
    let v1 = p.sigma_z1 * p.sigma_z1;
    let v2 = p.sigma_z2 * p.sigma_z2;
    // Y − βX = φU + εy, independent of both instruments.
    let resid = p.phi * p.phi * p.sigma_u * p.sigma_u + p.sigma_y * p.sigma_y;
    PluginMatrices::analytic(
        DMatrix::from_row_slice(2, 1, &[-p.alpha1 * v1, -p.alpha2 * v2]),
        DMatrix::from_row_slice(2, 2, &[v1 * resid, 0.0, 0.0, v2 * resid]),
    )
}

pub fn build(p: TwoIvParams) -> Result<Scm> {
    let sources = DataSourceSet::new(
        &["Z1", "Z2", "X", "Y"],
        &[("XYZ1", &["X", "Y", "Z1"], 1.0), ("XYZ2", &["X", "Y", "Z2"], 1.0)],
    )?;
    let system = TwoIvMoments {
        rows: vec![vec![Z1, X, Y], vec![Z2, X, Y]],
        monos: vec![vec![Z1, Y], vec![Z1, X], vec![Z2, Y], vec![Z2, X]],
    };
    let model = MomentModel::new(
        "two_iv",
        &["beta"],
        sources,
        vec![vec![true, false], vec![false, true]],
        ThetaBox::standard(1, &[]),
        Arc::new(system),
    )?;
    let spec = ScmSpec {
        name: "two_iv".into(),
        params: vec![
            ("beta".into(), p.beta),
            ("alpha1".into(), p.alpha1),
            ("alpha2".into(), p.alpha2),
            ("gamma".into(), p.gamma),
            ("phi".into(), p.phi),
            ("sigma_z1".into(), p.sigma_z1),
            ("sigma_z2".into(), p.sigma_z2),
            ("sigma_u".into(), p.sigma_u),
            ("sigma_x".into(), p.sigma_x),
            ("sigma_y".into(), p.sigma_y),
        ],
        true_theta: vec![p.beta],
        true_beta: p.beta,
        noise: vec![
            "Z1 ~ N(0, sigma_z1^2)".into(),
            "Z2 ~ N(0, sigma_z2^2)".into(),
            "U ~ N(0, sigma_u^2)".into(),
            "eps_x ~ N(0, sigma_x^2)".into(),
            "eps_y ~ N(0, sigma_y^2)".into(),
        ],
    };
    Ok(Scm::new(spec, model, Arc::new(TwoIvSampler(p)), Some(analytic_plugins(&p))))
}
