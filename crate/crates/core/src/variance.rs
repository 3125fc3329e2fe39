//! Asymptotic covariance `Σ(θ, κ)` and target variance `V(θ, κ)` for any
//! candidate selection ratio, computed from plug-in `G` and `Ω` estimates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{OmsError, Result};
use crate::linalg::{sym_pinv, EIGEN_FLOOR};
use crate::model::{History, MomentModel};

/// Tolerance on `Σ κ_i = 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Sandwich rank threshold relative to its trace.
pub const RANK_TOL: f64 = 1e-10;

/// A point on the probability simplex over data sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SelectionRatio(Vec<f64>);

impl SelectionRatio {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(OmsError::config("a selection ratio needs at least two entries"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OmsError::config(format!(
                "selection ratio {weights:?} has negative or non-finite entries"
            )));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(OmsError::config(format!(
                "selection ratio {weights:?} sums to {s}, not 1"
            )));
        }
        Ok(SelectionRatio(weights))
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if s.is_nan() || s <= 0.0 || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OmsError::config(format!(
                "cannot normalize {weights:?} onto the simplex"
            )));
        }
        Self::new(weights.iter().map(|w| w / s).collect())
    }

    pub(crate) fn from_weights_unchecked(weights: Vec<f64>) -> Self {
        SelectionRatio(weights)
    }

    pub fn center(n: usize) -> Self {
        SelectionRatio(vec![1.0 / n as f64; n])
    }

    pub fn vertex(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        SelectionRatio(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, c: &[f64]) -> f64 {
        self.0.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    pub fn linf_distance(&self, other: &SelectionRatio) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl TryFrom<Vec<f64>> for SelectionRatio {
    type Error = OmsError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SelectionRatio::new(v)
    }
}

impl From<SelectionRatio> for Vec<f64> {
    fn from(k: SelectionRatio) -> Vec<f64> {
        k.0
    }
}

/// Per-moment estimates of `G = E[∂g̃/∂θ]` and `Ω = E[g̃ g̃ᵀ]`.
///
/// Each row of `g` and each entry of `omega` is averaged over exactly the
/// records that observed it; `row_support` and `pair_support` hold those
/// counts. Entries with zero support are flagged and never enter a finite
/// variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginMatrices {
    pub g: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub row_support: Vec<usize>,
    pub pair_support: DMatrix<usize>,
}

impl PluginMatrices {
    /// Plug-ins from an adaptively collected history.
    pub fn from_history(history: &History, model: &MomentModel, theta: &[f64]) -> Self {
        let (m, d) = (model.n_moments(), model.n_params());
        let mut g = DMatrix::zeros(m, d);
        let mut omega = DMatrix::zeros(m, m);
        let mut row_support = vec![0usize; m];
        let mut pair_support = DMatrix::from_element(m, m, 0usize);
        let mut gt = vec![0.0; m];
        let mut jrow = vec![0.0; d];
        let sys = model.system();
        for obs in history.records() {
            let mask = model.mask(obs.source());
            model.masked_moments_into(theta, obs, &mut gt);
            for j in 0..m {
                if !mask[j] {
                    continue;
                }
                row_support[j] += 1;
                sys.jacobian_row(j, theta, obs.values(), &mut jrow);
                for c in 0..d {
                    g[(j, c)] += jrow[c];
                }
                for k in 0..=j {
                    if mask[k] {
                        pair_support[(j, k)] += 1;
                        omega[(j, k)] += gt[j] * gt[k];
                    }
                }
            }
        }
        Self::finish(g, omega, row_support, pair_support)
    }

    /// Population plug-ins from `n` full joint draws (every row observed).
    pub fn from_full_draws<F>(model: &MomentModel, theta: &[f64], n: usize, mut draw: F) -> Self
    where
        F: FnMut(&mut [f64]),
    {
        let (m, d) = (model.n_moments(), model.n_params());
        let sys = model.system();
        let mut g = DMatrix::zeros(m, d);
        let mut omega = DMatrix::zeros(m, m);
        let mut x = vec![0.0; model.sources().variable_names().len()];
        let mut gt = vec![0.0; m];
        let mut jrow = vec![0.0; d];
        for _ in 0..n {
            draw(&mut x);
            for (j, slot) in gt.iter_mut().enumerate() {
                *slot = sys.moment(j, theta, &x);
            }
            for j in 0..m {
                sys.jacobian_row(j, theta, &x, &mut jrow);
                for c in 0..d {
                    g[(j, c)] += jrow[c];
                }
                for k in 0..=j {
                    omega[(j, k)] += gt[j] * gt[k];
                }
            }
        }
        Self::finish(
            g,
            omega,
            vec![n; m],
            DMatrix::from_fn(m, m, |j, k| if k <= j { n } else { 0 }),
        )
    }

    /// Known population matrices.
    pub fn analytic(g: DMatrix<f64>, omega: DMatrix<f64>) -> Self {
        let m = g.nrows();
        PluginMatrices {
            g,
            omega,
            row_support: vec![usize::MAX; m],
            pair_support: DMatrix::from_element(m, m, usize::MAX),
        }
    }

    fn finish(
        mut g: DMatrix<f64>,
        mut omega: DMatrix<f64>,
        row_support: Vec<usize>,
        mut pair_support: DMatrix<usize>,
    ) -> Self {
        let m = g.nrows();
        for j in 0..m {
            let n = row_support[j];
            if n > 0 {
                g.row_mut(j).scale_mut(1.0 / n as f64);
            }
            for k in 0..=j {
                let n = pair_support[(j, k)];
                let v = if n > 0 {
                    omega[(j, k)] / n as f64
                } else {
                    0.0
                };
                omega[(j, k)] = v;
                omega[(k, j)] = v;
                pair_support[(k, j)] = n;
            }
        }
        PluginMatrices {
            g,
            omega,
            row_support,
            pair_support,
        }
    }

    pub fn is_flagged(&self, j: usize, k: usize) -> bool {
        self.pair_support[(j, k)] == 0
    }
}

/// `Σ(θ, κ)` or the marker for a rank-deficient sandwich.
#[derive(Debug, Clone, PartialEq)]
pub enum Sigma {
    Finite(DMatrix<f64>),
    Singular,
}

/// `m̄(κ) = Σ_i κ_i m_i` and `m*_Ω(κ) = Σ_i κ_i m_i m_iᵀ`.
pub fn mask_weights(masks: &[Vec<bool>], kappa: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = masks[0].len();
    let mut mbar = vec![0.0; m];
    let mut mom = DMatrix::zeros(m, m);
    for (mask, &k) in masks.iter().zip(kappa) {
        if k == 0.0 {
            continue;
        }
        for j in 0..m {
            if mask[j] {
                mbar[j] += k;
                for l in 0..m {
                    if mask[l] {
                        mom[(j, l)] += k;
                    }
                }
            }
        }
    }
    (mbar, mom)
}

pub fn asymptotic_sigma(pm: &PluginMatrices, model: &MomentModel, kappa: &SelectionRatio) -> Sigma {
    sigma_from_parts(pm, model.masks(), kappa.weights())
}

fn sigma_from_parts(pm: &PluginMatrices, masks: &[Vec<bool>], kappa: &[f64]) -> Sigma {
    let (mbar, mom) = mask_weights(masks, kappa);
    let active: Vec<usize> = (0..mbar.len()).filter(|&j| mbar[j] > 0.0).collect();
    let a = active.len();
    let d = pm.g.ncols();
    if a == 0 {
        return Sigma::Singular;
    }
    for (p, &j) in active.iter().enumerate() {
        if pm.row_support[j] == 0 {
            return Sigma::Singular;
        }
        for &k in &active[..=p] {
            if mom[(j, k)] > 0.0 && pm.is_flagged(j, k) {
                return Sigma::Singular;
            }
        }
    }
    let gs = DMatrix::from_fn(a, d, |r, c| mbar[active[r]] * pm.g[(active[r], c)]);
    let os = DMatrix::from_fn(a, a, |r, c| {
        let (j, k) = (active[r], active[c]);
        mom[(j, k)] * pm.omega[(j, k)]
    });
    let info = gs.transpose() * sym_pinv(&os, EIGEN_FLOOR) * &gs;
    let info = (&info + info.transpose()) * 0.5;
    let trace = info.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return Sigma::Singular;
    }
    let eig = SymmetricEigen::new(info);
    if eig.eigenvalues.iter().any(|&l| l < RANK_TOL * trace) {
        return Sigma::Singular;
    }
    let mut sigma = DMatrix::zeros(d, d);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        sigma += (v * v.transpose()) / l;
    }
    Sigma::Finite((&sigma + sigma.transpose()) * 0.5)
}

/// `V(θ, κ) = ∇f_tarᵀ Σ ∇f_tar`; `+∞` marks a rank-deficient sandwich.
pub fn target_variance(
    pm: &PluginMatrices,
    model: &MomentModel,
    theta: &[f64],
    kappa: &SelectionRatio,
) -> Result<f64> {
    let (_, grad) = model.target_unchecked(theta)?;
    Ok(quadratic(&asymptotic_sigma(pm, model, kappa), &grad))
}

/// `V(θ, κ)·(κᵀc)`.
pub fn budgeted_objective(
    pm: &PluginMatrices,
    model: &MomentModel,
    theta: &[f64],
    kappa: &SelectionRatio,
    costs: &[f64],
) -> Result<f64> {
    check_costs(costs, kappa.len())?;
    Ok(target_variance(pm, model, theta, kappa)? * kappa.dot(costs))
}

fn check_costs(costs: &[f64], n: usize) -> Result<()> {
    if costs.len() != n || costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(OmsError::config(format!(
            "costs {costs:?} must be {n} strictly positive numbers"
        )));
    }
    Ok(())
}

fn quadratic(sigma: &Sigma, grad: &DVector<f64>) -> f64 {
    match sigma {
        Sigma::Finite(s) => {
            if grad.iter().all(|g| *g == 0.0) {
                return 0.0;
            }
            grad.dot(&(s * grad)).max(0.0)
        }
        Sigma::Singular => f64::INFINITY,
    }
}

/// `κ ↦ V(θ, κ)` (optionally times `κᵀc`) with the gradient and masks
/// resolved once, for repeated evaluation during simplex search.
#[derive(Debug, Clone)]
pub struct VarianceObjective<'a> {
    pm: &'a PluginMatrices,
    masks: &'a [Vec<bool>],
    grad: DVector<f64>,
    costs: Option<Vec<f64>>,
}

impl<'a> VarianceObjective<'a> {
    pub fn new(
        pm: &'a PluginMatrices,
        model: &'a MomentModel,
        theta: &[f64],
        costs: Option<&[f64]>,
    ) -> Result<Self> {
        let (_, grad) = model.target_unchecked(theta)?;
        if let Some(c) = costs {
            check_costs(c, model.n_sources())?;
        }
        Ok(VarianceObjective {
            pm,
            masks: model.masks(),
            grad,
            costs: costs.map(|c| c.to_vec()),
        })
    }

    pub fn eval(&self, kappa: &[f64]) -> f64 {
        let v = quadratic(&sigma_from_parts(self.pm, self.masks, kappa), &self.grad);
        match &self.costs {
            Some(c) => v * kappa.iter().zip(c).map(|(a, b)| a * b).sum::<f64>(),
            None => v,
        }
    }
}
