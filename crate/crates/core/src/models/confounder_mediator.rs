//! Confounder-mediator graph: the effect of `X` on `Y` is identified both by
//! backdoor adjustment on the confounder `W` and by the frontdoor through
//! the mediator `M`, each from a different source.
//!
//! `W ~ N(0, σw²)`, `X = dW + εx`, `M = (β/a)X + εm`, `Y = aM + bW + εy`,
//! `θ = [β, a, b, d, σw², σx²]`.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::{Sampler, Scm, ScmSpec};
use crate::error::Result;
use crate::model::{DataSourceSet, MomentModel, MomentSystem, Monomial, ThetaBox, VarId};
use crate::rng::NoiseStreams;

const W: VarId = 0;
const X: VarId = 1;
const M: VarId = 2;
const Y: VarId = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmParams {
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub sigma_w: f64,
    pub sigma_x: f64,
    pub sigma_m: f64,
    pub sigma_y: f64,
}

impl Default for CmParams {
    fn default() -> Self {
        CmParams {
            beta: -0.32,
            a: 0.33,
            b: -0.34,
            d: 0.45,
            sigma_w: 1.0,
            sigma_x: 1.0,
            sigma_m: 1.0,
            sigma_y: 1.0,
        }
    }
}

struct CmMoments {
    rows: Vec<Vec<VarId>>,
    monos: Vec<Monomial>,
}

/// `q = d²σw² + σx²` and `k = b·d·σw² / q` with their θ-gradients.
fn frontdoor_constants(th: &[f64]) -> (f64, f64, [f64; 6], [f64; 6]) {
    let (b, d, sw, sx) = (th[2], th[3], th[4], th[5]);
    let q = d * d * sw + sx;
    let k = b * d * sw / q;
    let dq = [0.0, 0.0, 0.0, 2.0 * d * sw, d * d, 1.0];
    let mut dk = [0.0; 6];
    dk[2] = d * sw / q;
    dk[3] = b * sw / q - k * dq[3] / q;
    dk[4] = b * d / q - k * dq[4] / q;
    dk[5] = -k / q;
    (q, k, dq, dk)
}

impl MomentSystem for CmMoments {
    fn n_params(&self) -> usize {
        6
    }

    fn row_variables(&self) -> &[Vec<VarId>] {
        &self.rows
    }

    fn moment(&self, row: usize, th: &[f64], x: &[f64]) -> f64 {
        let (beta, a, b, d, sw) = (th[0], th[1], th[2], th[3], th[4]);
        let (q, k, _, _) = frontdoor_constants(th);
        match row {
            0 => x[X] * (x[Y] - b * x[W] - beta * x[X]),
            1 => x[W] * (x[Y] - b * x[W] - beta * x[X]),
            2 => x[X] * (x[M] - beta / a * x[X]),
            3 => x[M] * (x[Y] - a * x[M] - k * x[X]),
            4 => x[X] * (x[Y] - a * x[M] - k * x[X]),
            5 => x[W] * x[W] - sw,
            6 => x[W] * (x[X] - d * x[W]),
            _ => x[X] * x[X] - q,
        }
    }

    fn jacobian_row(&self, row: usize, th: &[f64], x: &[f64], out: &mut [f64]) {
        let (beta, a) = (th[0], th[1]);
        let (_, _, dq, dk) = frontdoor_constants(th);
        out.iter_mut().for_each(|v| *v = 0.0);
        match row {
            0 => {
                out[0] = -x[X] * x[X];
                out[2] = -x[X] * x[W];
            }
            1 => {
                out[0] = -x[W] * x[X];
                out[2] = -x[W] * x[W];
            }
            2 => {
                out[0] = -x[X] * x[X] / a;
                out[1] = beta / (a * a) * x[X] * x[X];
            }
            3 | 4 => {
                let lead = if row == 3 { x[M] } else { x[X] };
                out[1] = -lead * x[M];
                for (o, dki) in out.iter_mut().zip(dk.iter()) {
                    if *dki != 0.0 {
                        *o += -lead * x[X] * dki;
                    }
                }
            }
            5 => out[4] = -1.0,
            6 => out[3] = -x[W] * x[W],
            _ => {
                for (o, dqi) in out.iter_mut().zip(dq.iter()) {
                    *o = -dqi;
                }
            }
        }
    }

    fn target(&self, th: &[f64]) -> Option<f64> {
        Some(th[0])
    }

    fn target_gradient(&self, _th: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
        true
    }

    fn monomials(&self) -> &[Monomial] {
        &self.monos
    }

    fn coefficients(&self, th: &[f64], c: &mut [f64]) {
        let (beta, a, b, d, sw) = (th[0], th[1], th[2], th[3], th[4]);
        let (q, k, _, _) = frontdoor_constants(th);
        // monomials: XY, XW, XX, WY, WW, XM, MY, MM, 1
        #[rustfmt::skip]
        let rows: [[f64; 9]; 8] = [
            [1.0, -b, -beta, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, -beta, 0.0, 1.0, -b, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, -beta / a, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, -k, 1.0, -a, 0.0],
            [1.0, 0.0, -k, 0.0, 0.0, -a, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -sw],
            [0.0, 1.0, 0.0, 0.0, -d, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -q],
        ];
        for (j, r) in rows.iter().enumerate() {
            c[j * 9..(j + 1) * 9].copy_from_slice(r);
        }
    }
}

struct CmSampler(CmParams);

impl Sampler for CmSampler {
    fn n_equations(&self) -> usize {
        4
    }

    fn draw(&self, s: &mut NoiseStreams, out: &mut [f64]) {
        let p = &self.0;
        let n = |s: &mut NoiseStreams, eq: usize| -> f64 { StandardNormal.sample(s.eq(eq)) };
        let w = p.sigma_w * n(s, 0);
        let x = p.d * w + p.sigma_x * n(s, 1);
        let m = p.beta / p.a * x + p.sigma_m * n(s, 2);
        let y = p.a * m + p.b * w + p.sigma_y * n(s, 3);
        out[W] = w;
        out[X] = x;
        out[M] = m;
        out[Y] = y;
    }
}

pub fn build(p: CmParams) -> Result<Scm> {
    let sources = DataSourceSet::new(
        &["W", "X", "M", "Y"],
        &[("XYW", &["X", "Y", "W"], 1.8), ("XYM", &["X", "Y", "M"], 1.0)],
    )?;
    let system = CmMoments {
        rows: vec![
            vec![W, X, Y],
            vec![W, X, Y],
            vec![X, M],
            vec![X, M, Y],
            vec![X, M, Y],
            vec![W],
            vec![W, X],
            vec![X],
        ],
        monos: vec![
            vec![X, Y],
            vec![X, W],
            vec![X, X],
            vec![W, Y],
            vec![W, W],
            vec![X, M],
            vec![M, Y],
            vec![M, M],
            vec![],
        ],
    };
    let s1 = vec![true, true, false, false, false, true, true, true];
    let s2 = vec![false, false, true, true, true, false, false, true];
    let model = MomentModel::new(
        "confounder_mediator",
        &["beta", "a", "b", "d", "sigma2_w", "sigma2_x"],
        sources,
        vec![s1, s2],
        ThetaBox::standard(6, &[4, 5]),
        Arc::new(system),
    )?;
    let spec = ScmSpec {
        name: "confounder_mediator".into(),
        params: vec![
            ("beta".into(), p.beta),
            ("a".into(), p.a),
            ("b".into(), p.b),
            ("d".into(), p.d),
            ("sigma_w".into(), p.sigma_w),
            ("sigma_x".into(), p.sigma_x),
            ("sigma_m".into(), p.sigma_m),
            ("sigma_y".into(), p.sigma_y),
        ],
        true_theta: vec![
            p.beta,
            p.a,
            p.b,
            p.d,
            p.sigma_w * p.sigma_w,
            p.sigma_x * p.sigma_x,
        ],
        true_beta: p.beta,
        noise: vec![
            "W ~ N(0, sigma_w^2)".into(),
            "eps_x ~ N(0, sigma_x^2)".into(),
            "eps_m ~ N(0, sigma_m^2)".into(),
            "eps_y ~ N(0, sigma_y^2)".into(),
        ],
    };
    Ok(Scm::new(spec, model, Arc::new(CmSampler(p)), None))
}
