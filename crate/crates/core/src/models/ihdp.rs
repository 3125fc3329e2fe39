//! Semi-synthetic IHDP environment: covariates birth weight `W1`, maternal
//! smoking `W2` and treatment `X` are resampled from data, and the outcome is
//! `Y = βX + α1 W1 + α2 W2 + εy`.
//!
//! Sources: `{X,Y,W1}`, `{X,Y,W2}` and `{X,Y,W1,W2}`. The parameter vector is
//! `θ = [β, α1, α2, d, τ1, τ2, σ²w1, σ²w2, σ²y]` with `d = E[W1W2]`,
//! `τi = E[X·Wi]` and `σ²wi = E[Wi²]`. In the cross rows the offsets
//! `α·d` and `α·τ` are subtracted after multiplying by the instrument, so
//! `E[X·r1] = α2·τ2` holds with zero mean at `θ*`.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Sampler, Scm, ScmSpec};
use crate::error::{OmsError, Result};
use crate::model::{DataSourceSet, MomentModel, MomentSystem, Monomial, ThetaBox, VarId};
use crate::rng::NoiseStreams;

const W1: VarId = 0;
const W2: VarId = 1;
const X: VarId = 2;
const Y: VarId = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IhdpParams {
    pub beta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub sigma_y: f64,
}

impl Default for IhdpParams {
    fn default() -> Self {
        IhdpParams {
            beta: 1.0,
            alpha1: 1.0,
            alpha2: 0.1,
            sigma_y: 1.0,
        }
    }
}

/// Source of `(W1, W2, X)` triples.
#[derive(Debug, Clone, PartialEq)]
pub enum IhdpCovariates {
    /// Uniform resampling with replacement from these rows.
    Rows(Vec<[f64; 3]>),
    /// `W1 ~ N(0,1)`, `W2 ~ Bernoulli(0.35)`,
    /// `X ~ Bernoulli(logistic(0.4·W1 − 0.3·W2))`.
    Synthetic,
}

const SYN_P_W2: f64 = 0.35;
const SYN_B_W1: f64 = 0.4;
const SYN_B_W2: f64 = -0.3;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `E[h(W1)]` for `W1 ~ N(0,1)` by composite Simpson on `[-12, 12]`.
fn normal_expectation<F: Fn(f64) -> f64>(h: F) -> f64 {
    let (a, b, n) = (-12.0f64, 12.0f64, 4000usize);
    let step = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = 0.0;
    for i in 0..=n {
        let x = a + step * i as f64;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * h(x) * pdf(x);
    }
    acc * step / 3.0
}

impl IhdpCovariates {
    pub fn synthetic() -> Self {
        IhdpCovariates::Synthetic
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, IhdpCovariates::Synthetic)
    }

    pub fn from_rows(rows: Vec<[f64; 3]>) -> Result<Self> {
        if rows.is_empty() {
            return Err(OmsError::Ingest {
                row: 0,
                message: "covariate file has no data rows".into(),
            });
        }
        Ok(IhdpCovariates::Rows(rows))
    }

    /// Reads a CSV with columns `W1` (real), `W2` (binary) and `X` (binary).
    /// Row numbers in errors count the header as row 1.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| OmsError::Io(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers.iter().position(|h| h == name).ok_or_else(|| OmsError::Ingest {
                row: 1,
                message: format!("missing column `{name}`"),
            })
        };
        let (c1, c2, cx) = (col("W1")?, col("W2")?, col("X")?);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| OmsError::Ingest {
                row,
                message: e.to_string(),
            })?;
            let field = |c: usize, name: &str| -> Result<f64> {
                let raw = rec.get(c).ok_or_else(|| OmsError::Ingest {
                    row,
                    message: format!("missing `{name}`"),
                })?;
                let v: f64 = raw.parse().map_err(|_| OmsError::Ingest {
                    row,
                    message: format!("`{name}` = `{raw}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(OmsError::Ingest {
                        row,
                        message: format!("`{name}` is not finite"),
                    });
                }
                Ok(v)
            };
            let w1 = field(c1, "W1")?;
            let w2 = field(c2, "W2")?;
            let x = field(cx, "X")?;
            for (name, v) in [("W2", w2), ("X", x)] {
                if v != 0.0 && v != 1.0 {
                    return Err(OmsError::Ingest {
                        row,
                        message: format!("`{name}` must be 0 or 1, got {v}"),
                    });
                }
            }
            rows.push([w1, w2, x]);
        }
        Self::from_rows(rows)
    }

    /// One `(W1, W2, X)` triple. File mode reads substream 0 only.
    pub fn draw(&self, s: &mut NoiseStreams) -> [f64; 3] {
        match self {
            IhdpCovariates::Rows(rows) => rows[s.eq(0).random_range(0..rows.len())],
            IhdpCovariates::Synthetic => {
                let w1: f64 = StandardNormal.sample(s.eq(0));
                let w2 = if s.eq(1).random::<f64>() < SYN_P_W2 { 1.0 } else { 0.0 };
                let p = logistic(SYN_B_W1 * w1 + SYN_B_W2 * w2);
                let x = if s.eq(2).random::<f64>() < p { 1.0 } else { 0.0 };
                [w1, w2, x]
            }
        }
    }

    /// `[E W1W2, E XW1, E XW2, E W1², E W2²]` under the resampling law.
    pub fn moments(&self) -> [f64; 5] {
        match self {
            IhdpCovariates::Rows(rows) => {
                let n = rows.len() as f64;
                let mut m = [0.0; 5];
                for r in rows {
                    m[0] += r[0] * r[1];
                    m[1] += r[2] * r[0];
                    m[2] += r[2] * r[1];
                    m[3] += r[0] * r[0];
                    m[4] += r[1] * r[1];
                }
                m.map(|v| v / n)
            }
            IhdpCovariates::Synthetic => {
                let p = SYN_P_W2;
                let t1 = (1.0 - p) * normal_expectation(|w| w * logistic(SYN_B_W1 * w))
                    + p * normal_expectation(|w| w * logistic(SYN_B_W1 * w + SYN_B_W2));
                let t2 = p * normal_expectation(|w| logistic(SYN_B_W1 * w + SYN_B_W2));
                [0.0, t1, t2, 1.0, p]
            }
        }
    }
}

struct IhdpMoments {
    rows: Vec<Vec<VarId>>,
    monos: Vec<Monomial>,
}

impl MomentSystem for IhdpMoments {
    fn n_params(&self) -> usize {
        9
    }

    fn row_variables(&self) -> &[Vec<VarId>] {
        &self.rows
    }

    fn moment(&self, row: usize, th: &[f64], x: &[f64]) -> f64 {
        let [b, a1, a2, d, t1, t2, s1, s2, sy] = th[..9] else {
            unreachable!()
        };
        let r1 = || x[Y] - a1 * x[W1] - b * x[X];
        let r2 = || x[Y] - a2 * x[W2] - b * x[X];
        match row {
            0 => x[W1] * r1() - a2 * d,
            1 => x[X] * r1() - a2 * t2,
            2 => x[W2] * r2() - a1 * d,
            3 => x[X] * r2() - a1 * t1,
            4 => x[W1] * x[W2] - d,
            5 => x[X] * x[W1] - t1,
            6 => x[X] * x[W2] - t2,
            7 => x[W1] * x[W1] - s1,
            8 => x[W2] * x[W2] - s2,
            9 => r1().powi(2) - a2 * a2 * s2 - sy,
            _ => r2().powi(2) - a1 * a1 * s1 - sy,
        }
    }

    fn jacobian_row(&self, row: usize, th: &[f64], x: &[f64], out: &mut [f64]) {
        let [b, a1, a2, d, t1, t2, s1, s2, _] = th[..9] else {
            unreachable!()
        };
        out.iter_mut().for_each(|v| *v = 0.0);
        let (w1, w2, xx) = (x[W1], x[W2], x[X]);
        match row {
            0 => {
                out[0] = -w1 * xx;
                out[1] = -w1 * w1;
                out[2] = -d;
                out[3] = -a2;
            }
            1 => {
                out[0] = -xx * xx;
                out[1] = -xx * w1;
                out[2] = -t2;
                out[5] = -a2;
            }
            2 => {
                out[0] = -w2 * xx;
                out[2] = -w2 * w2;
                out[1] = -d;
                out[3] = -a1;
            }
            3 => {
                out[0] = -xx * xx;
                out[2] = -xx * w2;
                out[1] = -t1;
                out[4] = -a1;
            }
            4 => out[3] = -1.0,
            5 => out[4] = -1.0,
            6 => out[5] = -1.0,
            7 => out[6] = -1.0,
            8 => out[7] = -1.0,
            9 => {
                let r1 = x[Y] - a1 * w1 - b * xx;
                out[0] = -2.0 * r1 * xx;
                out[1] = -2.0 * r1 * w1;
                out[2] = -2.0 * a2 * s2;
                out[7] = -a2 * a2;
                out[8] = -1.0;
            }
            _ => {
                let r2 = x[Y] - a2 * w2 - b * xx;
                out[0] = -2.0 * r2 * xx;
                out[2] = -2.0 * r2 * w2;
                out[1] = -2.0 * a1 * s1;
                out[6] = -a1 * a1;
                out[8] = -1.0;
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
        let [b, a1, a2, d, t1, t2, s1, s2, sy] = th[..9] else {
            unreachable!()
        };
        // monomials: W1Y, W1W1, W1X, W1, XY, XX, X, W2Y, W2W2, W2X, W2, W1W2, 1, YY
        #[rustfmt::skip]
        let rows: [[f64; 14]; 11] = [
            [1.0, -a1, -b, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -a2 * d, 0.0],
            [0.0, 0.0, -a1, 0.0, 1.0, -b, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -a2 * t2, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -a2, -b, 0.0, 0.0, -a1 * d, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, -b, 0.0, 0.0, 0.0, -a2, 0.0, 0.0, -a1 * t1, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -d, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -t1, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -t2, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -s1, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -s2, 0.0],
            [-2.0 * a1, a1 * a1, 2.0 * a1 * b, 0.0, -2.0 * b, b * b, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
             -(a2 * a2 * s2 + sy), 1.0],
            [0.0, 0.0, 0.0, 0.0, -2.0 * b, b * b, 0.0, -2.0 * a2, a2 * a2, 2.0 * a2 * b, 0.0, 0.0,
             -(a1 * a1 * s1 + sy), 1.0],
        ];
        for (j, r) in rows.iter().enumerate() {
            c[j * 14..(j + 1) * 14].copy_from_slice(r);
        }
    }
}

struct IhdpSampler {
    params: IhdpParams,
    covariates: IhdpCovariates,
}

impl Sampler for IhdpSampler {
    fn n_equations(&self) -> usize {
        4
    }

    fn draw(&self, s: &mut NoiseStreams, out: &mut [f64]) {
        let p = &self.params;
        let [w1, w2, x] = self.covariates.draw(s);
        let eps: f64 = StandardNormal.sample(s.eq(3));
        out[W1] = w1;
        out[W2] = w2;
        out[X] = x;
        out[Y] = p.beta * x + p.alpha1 * w1 + p.alpha2 * w2 + p.sigma_y * eps;
    }
}

pub fn build(p: IhdpParams, covariates: IhdpCovariates) -> Result<Scm> {
    let sources = DataSourceSet::new(
        &["W1", "W2", "X", "Y"],
        &[
            ("XYW1", &["X", "Y", "W1"], 1.0),
            ("XYW2", &["X", "Y", "W2"], 3.0),
            ("XYW1W2", &["X", "Y", "W1", "W2"], 3.5),
        ],
    )?;
    let rows = vec![
        vec![W1, X, Y],
        vec![W1, X, Y],
        vec![W2, X, Y],
        vec![W2, X, Y],
        vec![W1, W2],
        vec![W1, X],
        vec![W2, X],
        vec![W1],
        vec![W2],
        vec![W1, X, Y],
        vec![W2, X, Y],
    ];
    let monos = vec![
        vec![W1, Y],
        vec![W1, W1],
        vec![W1, X],
        vec![W1],
        vec![X, Y],
        vec![X, X],
        vec![X],
        vec![W2, Y],
        vec![W2, W2],
        vec![W2, X],
        vec![W2],
        vec![W1, W2],
        vec![],
        vec![Y, Y],
    ];
    let w1_rows = [0, 1, 5, 7, 9];
    let w2_rows = [2, 3, 6, 8, 10];
    let mask = |rows: &[usize]| (0..11).map(|j| rows.contains(&j)).collect::<Vec<bool>>();
    let model = MomentModel::new(
        "ihdp",
        &[
            "beta", "alpha1", "alpha2", "d", "tau1", "tau2", "sigma2_w1", "sigma2_w2", "sigma2_y",
        ],
        sources,
        vec![mask(&w1_rows), mask(&w2_rows), vec![true; 11]],
        ThetaBox::standard(9, &[6, 7, 8]),
        Arc::new(IhdpMoments { rows, monos }),
    )?;
    let [d, t1, t2, s1, s2] = covariates.moments();
    let synthetic = covariates.is_synthetic();
    let n_rows = match &covariates {
        IhdpCovariates::Rows(r) => Some(r.len()),
        IhdpCovariates::Synthetic => None,
    };
    let spec = ScmSpec {
        name: "ihdp".into(),
        params: vec![
            ("beta".into(), p.beta),
            ("alpha1".into(), p.alpha1),
            ("alpha2".into(), p.alpha2),
            ("sigma_y".into(), p.sigma_y),
        ],
        true_theta: vec![p.beta, p.alpha1, p.alpha2, d, t1, t2, s1, s2, p.sigma_y * p.sigma_y],
        true_beta: p.beta,
        noise: vec![
            if synthetic {
                "(W1, W2, X) from the synthetic covariate law".into()
            } else {
                "(W1, W2, X) resampled uniformly from covariate rows".into()
            },
            "eps_y ~ N(0, sigma_y^2)".into(),
        ],
    };
    let scm = Scm::new(
        spec,
        model,
        Arc::new(IhdpSampler {
            params: p,
            covariates,
        }),
        None,
    )
    .with_metadata("synthetic_covariates", synthetic.into());
    Ok(match n_rows {
        Some(n) => scm.with_metadata("covariate_rows", n.into()),
        None => scm,
    })
}
