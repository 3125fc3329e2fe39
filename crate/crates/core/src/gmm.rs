//! Two-step GMM from an adaptively collected history.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OmsError, Result};
use crate::linalg::{min_eigenvalue, sym_pinv, EIGEN_FLOOR};
use crate::model::{History, MomentModel};
use crate::nelder_mead::{self, NmOptions};
use crate::variance::RANK_TOL;

/// Default ridge for the regularized weight.
pub const DEFAULT_LAMBDA_W: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Identity,
    /// `[Ω̂(θ̂_os)]⁻¹` on the block of moments observed at least twice.
    Efficient,
    /// `[Ω̂(θ̂_os) + λ_W I]⁻¹`, `λ_W > 0`.
    Regularized(f64),
    /// A fixed symmetric PSD matrix.
    Fixed(DMatrix<f64>),
}

impl WeightSpec {
    pub fn validate(&self, n_moments: usize) -> Result<()> {
        match self {
            WeightSpec::Regularized(l) if !(l.is_finite() && *l > 0.0) => Err(OmsError::config(
                format!("regularized weight needs lambda_W > 0, got {l}"),
            )),
            WeightSpec::Fixed(w) => {
                if w.nrows() != n_moments || w.ncols() != n_moments {
                    return Err(OmsError::config(format!(
                        "fixed weight must be {n_moments}x{n_moments}"
                    )));
                }
                if (w - w.transpose()).abs().max() > 1e-12 {
                    return Err(OmsError::config("fixed weight is not symmetric"));
                }
                if min_eigenvalue(w) < -1e-10 {
                    return Err(OmsError::config("fixed weight is not positive semidefinite"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn is_two_step(&self) -> bool {
        matches!(self, WeightSpec::Efficient | WeightSpec::Regularized(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizerReport {
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmEstimate {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub weight_used: DMatrix<f64>,
    pub optimizer_report: OptimizerReport,
}

/// Knobs beyond the weight choice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateOptions {
    /// Extra starting points, e.g. the previous round's estimate.
    pub warm_starts: Vec<Vec<f64>>,
    /// Evaluate moments record by record even when the model offers the
    /// monomial form.
    pub force_generic: bool,
}

/// Sample mean of masked moments, reduced once per history.
struct MomentMeans<'a> {
    model: &'a MomentModel,
    history: &'a History,
    /// Row-major `M × F` sums of monomial `k` over records observing row `j`.
    feature_sums: Option<Vec<f64>>,
    n_features: usize,
    coeff: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> MomentMeans<'a> {
    fn new(model: &'a MomentModel, history: &'a History, force_generic: bool) -> Self {
        let monos = model.system().monomials();
        let (m, f) = (model.n_moments(), monos.len());
        let feature_sums = if f > 0 && !force_generic {
            let mut per_source = vec![0.0; model.n_sources() * f];
            for obs in history.records() {
                let x = obs.values();
                let base = obs.source().0 * f;
                for (k, mono) in monos.iter().enumerate() {
                    let mut p = 1.0;
                    for &v in mono {
                        p *= x[v];
                    }
                    // Monomials a source cannot evaluate only pair with rows
                    // that source masks out.
                    if !p.is_nan() {
                        per_source[base + k] += p;
                    }
                }
            }
            let mut sums = vec![0.0; m * f];
            for (i, mask) in model.masks().iter().enumerate() {
                for j in 0..m {
                    if mask[j] {
                        for k in 0..f {
                            sums[j * f + k] += per_source[i * f + k];
                        }
                    }
                }
            }
            Some(sums)
        } else {
            None
        };
        MomentMeans {
            model,
            history,
            feature_sums,
            n_features: f,
            coeff: vec![0.0; m * f],
            scratch: vec![0.0; m],
        }
    }

    fn mean(&mut self, theta: &[f64], out: &mut [f64]) {
        let m = self.model.n_moments();
        let t = self.history.len() as f64;
        match &self.feature_sums {
            Some(sums) => {
                let f = self.n_features;
                self.model.system().coefficients(theta, &mut self.coeff);
                for j in 0..m {
                    let mut acc = 0.0;
                    for k in 0..f {
                        let c = self.coeff[j * f + k];
                        if c != 0.0 {
                            acc += c * sums[j * f + k];
                        }
                    }
                    out[j] = acc / t;
                }
            }
            None => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for obs in self.history.records() {
                    self.model.masked_moments_into(theta, obs, &mut self.scratch);
                    for (o, g) in out.iter_mut().zip(&self.scratch) {
                        *o += g;
                    }
                }
                out.iter_mut().for_each(|v| *v /= t);
            }
        }
    }

    fn objective(&mut self, theta: &[f64], w: &DMatrix<f64>, gbar: &mut [f64]) -> f64 {
        self.mean(theta, gbar);
        let m = gbar.len();
        let mut q = 0.0;
        for j in 0..m {
            if gbar[j] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for k in 0..m {
                row += w[(j, k)] * gbar[k];
            }
            q += gbar[j] * row;
        }
        if q.is_nan() {
            f64::INFINITY
        } else {
            q
        }
    }
}

fn check_nonempty(history: &History) -> Result<()> {
    if history.is_empty() {
        Err(OmsError::EmptyHistory)
    } else {
        Ok(())
    }
}

/// `Q̂_T(θ) = ḡᵀ W ḡ` with `ḡ = (1/T) Σ_t m(s_t) ⊙ g̃(θ, x_t)`.
pub fn empirical_objective(
    history: &History,
    model: &MomentModel,
    theta: &[f64],
    w: &DMatrix<f64>,
) -> Result<f64> {
    check_nonempty(history)?;
    model.theta_box().check(theta)?;
    let mut gbar = vec![0.0; model.n_moments()];
    Ok(MomentMeans::new(model, history, true).objective(theta, w, &mut gbar))
}

/// `(1/T) Σ_t g_t g_tᵀ` of masked moments.
pub fn estimate_omega(history: &History, model: &MomentModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_nonempty(history)?;
    let m = model.n_moments();
    let mut omega = DMatrix::zeros(m, m);
    let mut g = vec![0.0; m];
    for obs in history.records() {
        model.masked_moments_into(theta, obs, &mut g);
        for j in 0..m {
            if g[j] == 0.0 {
                continue;
            }
            for k in 0..=j {
                omega[(j, k)] += g[j] * g[k];
            }
        }
    }
    let t = history.len() as f64;
    for j in 0..m {
        for k in 0..=j {
            let v = omega[(j, k)] / t;
            omega[(j, k)] = v;
            omega[(k, j)] = v;
        }
    }
    Ok(omega)
}

/// Number of records observing each moment row.
pub fn row_counts(history: &History, model: &MomentModel) -> Vec<usize> {
    let mut counts = vec![0usize; model.n_moments()];
    for (i, &n) in history.counts().iter().enumerate() {
        for (j, on) in model.masks()[i].iter().enumerate() {
            if *on {
                counts[j] += n;
            }
        }
    }
    counts
}

fn efficient_weight(omega: &DMatrix<f64>, counts: &[usize]) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] >= 2).collect();
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |r, c| omega[(keep[r], keep[c])]);
    let inv = sym_pinv(&sub, EIGEN_FLOOR);
    let m = counts.len();
    let mut w = DMatrix::zeros(m, m);
    for (r, &j) in keep.iter().enumerate() {
        for (c, &k) in keep.iter().enumerate() {
            w[(j, k)] = inv[(r, c)];
        }
    }
    w
}

fn regularized_weight(omega: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let m = omega.nrows();
    let shifted = omega + DMatrix::<f64>::identity(m, m) * lambda;
    let w = sym_pinv(&shifted, EIGEN_FLOOR);
    (&w + w.transpose()) * 0.5
}

/// Fraction of each box side used as a generic probe point; irrational-ish
/// so that it avoids the zeros of parameter denominators.
const PROBE_FRACTION: f64 = 0.5371;

/// Rows that were never observed are fine as long as the observed ones still
/// pin down θ: the mean Jacobian at a generic probe point must have full
/// column rank. Otherwise the first unobserved row is reported.
fn check_identified(history: &History, model: &MomentModel, counts: &[usize]) -> Result<()> {
    let Some(first_missing) = counts.iter().position(|&c| c == 0) else {
        return Ok(());
    };
    let (m, d) = (model.n_moments(), model.n_params());
    let observed = counts.iter().filter(|&&c| c > 0).count();
    if observed < d {
        return Err(OmsError::UnderIdentified { row: first_missing });
    }
    let bx = model.theta_box();
    let probe: Vec<f64> = (0..d)
        .map(|i| bx.lower[i] + PROBE_FRACTION * (bx.upper[i] - bx.lower[i]))
        .collect();
    let mut jac = DMatrix::<f64>::zeros(m, d);
    for obs in history.records() {
        jac += model.masked_jacobian(&probe, obs)?;
    }
    let sv = jac.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !max.is_finite() || (max > 0.0 && min > RANK_TOL * max) {
        Ok(())
    } else {
        Err(OmsError::UnderIdentified { row: first_missing })
    }
}

/// Two-step (or single-step) GMM estimate.
pub fn estimate(history: &History, model: &MomentModel, spec: WeightSpec, rng_seed: u64) -> Result<GmmEstimate> {
    estimate_with(history, model, spec, rng_seed, &EstimateOptions::default())
}

pub fn estimate_with(
    history: &History,
    model: &MomentModel,
    spec: WeightSpec,
    rng_seed: u64,
    opts: &EstimateOptions,
) -> Result<GmmEstimate> {
    check_nonempty(history)?;
    let m = model.n_moments();
    spec.validate(m)?;
    let counts = row_counts(history, model);
    check_identified(history, model, &counts)?;
    let d = model.n_params();
    if spec.is_two_step() && history.len() < d + 1 {
        return Err(OmsError::TooFewRecords {
            needed: d + 1,
            have: history.len(),
        });
    }

    let mut means = MomentMeans::new(model, history, opts.force_generic);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let identity = DMatrix::<f64>::identity(m, m);

    let first_w = match &spec {
        WeightSpec::Fixed(w) => w.clone(),
        _ => identity,
    };
    let first = minimize_objective(&mut means, model, &first_w, &opts.warm_starts, &mut rng);
    if !spec.is_two_step() {
        return Ok(GmmEstimate {
            theta_hat: first.0,
            objective: first.1,
            weight_used: first_w,
            optimizer_report: first.2,
        });
    }

    let omega = estimate_omega(history, model, &first.0)?;
    let w = match spec {
        WeightSpec::Efficient => efficient_weight(&omega, &counts),
        WeightSpec::Regularized(l) => regularized_weight(&omega, l),
        _ => unreachable!(),
    };
    let mut warm = vec![first.0.clone()];
    warm.extend(opts.warm_starts.iter().cloned());
    let second = minimize_objective(&mut means, model, &w, &warm, &mut rng);
    let report = OptimizerReport {
        iterations: first.2.iterations + second.2.iterations,
        converged: second.2.converged,
        restarts: first.2.restarts + second.2.restarts,
    };
    Ok(GmmEstimate {
        theta_hat: second.0,
        objective: second.1,
        weight_used: w,
        optimizer_report: report,
    })
}

const GMM_NM: NmOptions = NmOptions {
    max_iter: 2000,
    f_tol: 1e-12,
    x_tol: 1e-9,
};

/// Multi-start Nelder–Mead on the box: center, warm starts, one seeded
/// uniform draw, then a polish run from the best point found.
fn minimize_objective(
    means: &mut MomentMeans<'_>,
    model: &MomentModel,
    w: &DMatrix<f64>,
    warm_starts: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64, OptimizerReport) {
    let bx = model.theta_box();
    let d = bx.dim();
    let mut gbar = vec![0.0; model.n_moments()];
    let clamp = |x: &mut [f64]| bx.clamp(x);

    let mut starts: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let cold_step: Vec<f64> = (0..d).map(|i| (0.1 * (bx.upper[i] - bx.lower[i])).min(2.0)).collect();
    let warm_step = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| 0.1 * (1.0 + v.abs())).collect() };
    starts.push((bx.center(), cold_step.clone()));
    for ws in warm_starts {
        if ws.len() == d && ws.iter().all(|v| v.is_finite()) {
            let mut x = ws.clone();
            bx.clamp(&mut x);
            let step = warm_step(&x);
            starts.push((x, step));
        }
    }
    let draw: Vec<f64> = (0..d).map(|i| rng.random_range(bx.lower[i]..=bx.upper[i])).collect();
    starts.push((draw, cold_step));

    let mut best: Option<nelder_mead::NmResult> = None;
    let mut iterations = 0;
    let mut restarts = 0;
    for (x0, step) in &starts {
        let r = nelder_mead::minimize(|th| means.objective(th, w, &mut gbar), x0, step, clamp, GMM_NM);
        iterations += r.iterations;
        restarts += 1;
        if best.as_ref().is_none_or(|b| r.f < b.f) {
            best = Some(r);
        }
    }
    let b = best.expect("at least one start");
    let polish = nelder_mead::minimize(
        |th| means.objective(th, w, &mut gbar),
        &b.x,
        &warm_step(&b.x),
        clamp,
        GMM_NM,
    );
    iterations += polish.iterations;
    restarts += 1;
    let (x, f, converged) = if polish.f <= b.f {
        (polish.x, polish.f, polish.converged)
    } else {
        (b.x, b.f, b.converged)
    };
    (
        x,
        f,
        OptimizerReport {
            iterations,
            converged,
            restarts,
        },
    )
}

/// Mean masked moment vector `ḡ(θ)`.
pub fn moment_mean(history: &History, model: &MomentModel, theta: &[f64]) -> Result<DVector<f64>> {
    check_nonempty(history)?;
    let mut g = vec![0.0; model.n_moments()];
    MomentMeans::new(model, history, false).mean(theta, &mut g);
    Ok(DVector::from_vec(g))
}

/// Same as [`moment_mean`] but always summing record by record.
pub fn moment_mean_generic(history: &History, model: &MomentModel, theta: &[f64]) -> Result<DVector<f64>> {
    check_nonempty(history)?;
    let mut g = vec![0.0; model.n_moments()];
    MomentMeans::new(model, history, true).mean(theta, &mut g);
    Ok(DVector::from_vec(g))
}
