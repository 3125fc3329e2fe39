//! Property checks shared by the proptest suite and the acceptance target.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::path::PathBuf;

use nalgebra::DMatrix;
use oms::allocator::{integer_allocate, simplex_project, FeasibleRegion};
use oms::gmm::estimate_omega;
use oms::harness::run_episode;
use oms::linalg::min_eigenvalue;
use oms::model::{History, MomentModel, Observation, SourceIndex};
use oms::models::{by_name, ModelOptions, Scm};
use oms::policy::{run_policy, Horizon, PolicyKind, ReplayEnvironment, RunContext, ScmEnvironment};
use oms::SelectionRatio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

pub fn model(name: &str) -> Scm {
    by_name(name, &ModelOptions::default()).expect("registered model")
}

pub fn ihdp_real() -> Scm {
    by_name(
        "ihdp",
        &ModelOptions {
            ihdp_covariates: Some(fixture("ihdp_covariates.csv")),
        },
    )
    .expect("fixture loads")
}

pub fn random_simplex(rng: &mut impl Rng, n: usize) -> SelectionRatio {
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
    SelectionRatio::normalized(&w).unwrap()
}

fn norm2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn check_simplex_project(v: &[f64]) -> Check {
    let p = simplex_project(v);
    let w = p.weights();
    if w.iter().any(|x| *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(format!("P({v:?}) = {w:?} is off the simplex"));
    }
    let pp = simplex_project(w);
    if pp.linf_distance(&p) > 1e-12 {
        return Err(format!("not idempotent at {v:?}: {w:?} -> {:?}", pp.weights()));
    }
    // Optimality: no vertex direction decreases the distance to v.
    let d0 = norm2(w, v);
    for i in 0..w.len() {
        for t in [1e-3, 1e-1] {
            let mut q: Vec<f64> = w.iter().map(|x| x * (1.0 - t)).collect();
            q[i] += t;
            if norm2(&q, v) < d0 - 1e-12 {
                return Err(format!("P({v:?}) = {w:?} is not the closest point"));
            }
        }
    }
    Ok(())
}

pub fn check_lipschitz(u: &[f64], v: &[f64]) -> Check {
    let (pu, pv) = (simplex_project(u), simplex_project(v));
    let lhs = norm2(pu.weights(), pv.weights());
    let rhs = norm2(u, v);
    if lhs <= rhs + 1e-12 {
        Ok(())
    } else {
        Err(format!("|P(u) - P(v)| = {lhs} > |u - v| = {rhs}"))
    }
}

/// Projection lands in the region, and a target already inside is fixed.
pub fn check_region(region: &FeasibleRegion, target: &SelectionRatio, inside: &SelectionRatio) -> Check {
    let p = region.project(target);
    let tol = if region.is_affine() { 1e-10 } else { 1e-7 };
    if !region.contains(p.weights(), tol) {
        return Err(format!("projection {:?} of {:?} left region {region:?}", p.weights(), target.weights()));
    }
    let member = SelectionRatio::new(region.image(inside.weights())).unwrap();
    let back = region.project(&member);
    let tol = if region.is_affine() { 1e-10 } else { 1e-4 };
    if back.linf_distance(&member) > tol {
        return Err(format!(
            "member {:?} moved to {:?} by projection",
            member.weights(),
            back.weights()
        ));
    }
    let d_proj = norm2(p.weights(), target.weights());
    let d_member = norm2(member.weights(), target.weights());
    if d_proj > d_member + tol {
        return Err(format!("member {:?} is closer than the projection", member.weights()));
    }
    Ok(())
}

fn deviations(t: &[f64], c: &[usize], a: &[usize]) -> Vec<f64> {
    let n = (c.iter().sum::<usize>() + a.iter().sum::<usize>()) as f64;
    (0..t.len()).map(|i| ((c[i] + a[i]) as f64 / n - t[i]).abs()).collect()
}

fn cmp_tol(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > 1e-12 {
            return x.total_cmp(y);
        }
    }
    Ordering::Equal
}

fn compositions(n: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in compositions(n - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Exhaustive oracle: minimal ℓ∞ distance, then minimal sorted deviation
/// vector, then the allocation favouring lower source indices.
pub fn brute_force_allocate(target: &SelectionRatio, counts: &[usize], n_new: usize) -> Vec<usize> {
    let t = target.weights();
    let key = |a: &Vec<usize>| {
        let mut d = deviations(t, counts, a);
        d.sort_by(|x, y| y.total_cmp(x));
        d
    };
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for a in compositions(n_new, t.len()) {
        let k = key(&a);
        let better = match &best {
            None => true,
            Some((bk, ba)) => match cmp_tol(&k, bk) {
                Ordering::Less => true,
                Ordering::Equal => a > *ba,
                Ordering::Greater => false,
            },
        };
        if better {
            best = Some((k, a));
        }
    }
    best.unwrap().1
}

pub fn check_allocation(target: &SelectionRatio, counts: &[usize], n_new: usize) -> Check {
    let got = integer_allocate(target, counts, n_new);
    if got.iter().sum::<usize>() != n_new {
        return Err(format!("allocation {got:?} does not sum to {n_new}"));
    }
    let want = brute_force_allocate(target, counts, n_new);
    if got == want {
        Ok(())
    } else {
        Err(format!(
            "target {:?}, counts {counts:?}, n {n_new}: got {got:?}, brute force {want:?}",
            target.weights()
        ))
    }
}

/// A random point near θ* that stays clear of poles and variance floors.
pub fn interior_theta(scm: &Scm, rng: &mut impl Rng) -> Vec<f64> {
    let bx = scm.model().theta_box();
    scm.true_theta()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let v = t + rng.random_range(-0.1..0.1) * (1.0 + t.abs());
            let lo = if bx.lower[i] > 0.0 { 0.05 } else { bx.lower[i] };
            v.clamp(lo, bx.upper[i])
        })
        .collect()
}

pub fn random_observation(scm: &Scm, rng: &mut ChaCha8Rng) -> Observation {
    let src = SourceIndex(rng.random_range(0..scm.model().n_sources()));
    let mut streams = scm.noise_streams(rng.random());
    scm.sample(src, &mut streams).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Analytic masked Jacobian and target gradient against central differences.
pub fn check_derivatives(scm: &Scm, theta: &[f64], obs: &Observation) -> Check {
    let m: &MomentModel = scm.model();
    let jac = m.masked_jacobian(theta, obs).map_err(|e| e.to_string())?;
    for i in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[i].abs());
        let (mut tp, mut tm) = (theta.to_vec(), theta.to_vec());
        tp[i] += h;
        tm[i] -= h;
        let gp = m.masked_moments(&tp, obs).map_err(|e| e.to_string())?;
        let gm = m.masked_moments(&tm, obs).map_err(|e| e.to_string())?;
        for j in 0..m.n_moments() {
            let fd = (gp[j] - gm[j]) / (2.0 * h);
            if rel_err(jac[(j, i)], fd) > 1e-5 {
                return Err(format!(
                    "{}: d g[{j}]/d theta[{i}] analytic {} vs fd {fd} at {theta:?}",
                    scm.name(),
                    jac[(j, i)]
                ));
            }
        }
        if let (Ok((fp, _)), Ok((fm, _)), Ok((_, grad))) =
            (m.target_value(&tp), m.target_value(&tm), m.target_value(theta))
        {
            let fd = (fp - fm) / (2.0 * h);
            if rel_err(grad[i], fd) > 1e-5 {
                return Err(format!("{}: df/dtheta[{i}] analytic {} vs fd {fd}", scm.name(), grad[i]));
            }
        }
    }
    Ok(())
}

pub fn random_history(scm: &Scm, n: usize, seed: u64) -> History {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut streams = scm.noise_streams(seed);
    let mut h = History::new(scm.model().n_sources());
    for _ in 0..n {
        let src = SourceIndex(rng.random_range(0..scm.model().n_sources()));
        h.push(scm.sample(src, &mut streams).unwrap());
    }
    h
}

pub fn check_omega_psd(scm: &Scm, history: &History, theta: &[f64]) -> Check {
    let omega: DMatrix<f64> = estimate_omega(history, scm.model(), theta).map_err(|e| e.to_string())?;
    if (&omega - omega.transpose()).abs().max() > 1e-12 {
        return Err("omega not symmetric".into());
    }
    let lmin = min_eigenvalue(&omega);
    if lmin >= -1e-10 * (1.0 + omega.abs().max()) {
        Ok(())
    } else {
        Err(format!("{}: omega min eigenvalue {lmin}", scm.name()))
    }
}

/// Re-running a policy against its own log reproduces every query and the
/// estimate bit for bit.
pub fn check_replay(scm: &Scm, policy: &PolicyKind, horizon: Horizon, seed: u64) -> Check {
    let mut ctx = RunContext::new(seed);
    ctx.oracle = Some(SelectionRatio::center(scm.model().n_sources()));
    let mut env = ScmEnvironment::new(scm, seed);
    let first = run_policy(policy, scm.model(), horizon, &mut env, &ctx).map_err(|e| e.to_string())?;
    let mut replay = ReplayEnvironment::new(&first.history);
    let second = run_policy(policy, scm.model(), horizon, &mut replay, &ctx).map_err(|e| e.to_string())?;
    if first.history != second.history {
        return Err(format!("{policy}: replayed history differs"));
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if bits(&first.estimate.theta_hat) != bits(&second.estimate.theta_hat) {
        return Err(format!("{policy}: replayed estimate differs"));
    }
    if first.state.interim_estimates != second.state.interim_estimates {
        return Err(format!("{policy}: replayed interim trail differs"));
    }
    Ok(())
}

pub fn check_budget(scm: &Scm, policy: &PolicyKind, budget: f64, seed: u64) -> Check {
    let ctx = RunContext::new(seed);
    let mut env = ScmEnvironment::new(scm, seed);
    let out = run_policy(policy, scm.model(), Horizon::Budget(budget), &mut env, &ctx)
        .map_err(|e| format!("{policy} B={budget}: {e}"))?;
    let spent = out.history.spent(&scm.model().costs());
    if spent > budget * (1.0 + 1e-9) {
        return Err(format!("{policy} spent {spent} > {budget} (costs {:?})", scm.model().costs()));
    }
    if out.state.budget_left < 0.0 {
        return Err(format!("{policy}: negative budget_left"));
    }
    // Nothing affordable may remain unspent.
    let c_min = scm.model().costs().iter().cloned().fold(f64::INFINITY, f64::min);
    if budget - spent >= c_min * (1.0 + 1e-9) {
        return Err(format!("{policy} left {} unspent with cheapest source {c_min}", budget - spent));
    }
    Ok(())
}

/// MSE of `β̂` over `runs` paired episodes.
pub fn episode_betas(scm: &Scm, policy: &PolicyKind, horizon: Horizon, runs: u64, base: u64) -> Vec<f64> {
    let mut ctx = RunContext::new(base);
    ctx.oracle = Some(scm.oracle_kappa(None).unwrap().kappa);
    (0..runs)
        .map(|i| run_episode(policy, scm, horizon, base + i, &ctx).unwrap().beta_hat)
        .collect()
}

/// Mean realized `κ_T` and mean squared error of `β̂` over `runs` seeds,
/// episodes run in parallel.
pub fn mean_kappa(scm: &Scm, policy: &PolicyKind, horizon: Horizon, runs: u64, base: u64) -> (Vec<f64>, f64) {
    use rayon::prelude::*;
    let mut ctx = RunContext::new(base);
    if *policy == PolicyKind::Oracle {
        let costs = scm.model().costs();
        let c = matches!(horizon, Horizon::Budget(_)).then_some(costs.as_slice());
        ctx.oracle = Some(scm.oracle_kappa(c).unwrap().kappa);
    }
    let results: Vec<_> = (0..runs)
        .into_par_iter()
        .map(|i| run_episode(policy, scm, horizon, base + i, &ctx).unwrap())
        .collect();
    let n = scm.model().n_sources();
    let mut k = vec![0.0; n];
    for r in &results {
        for (a, b) in k.iter_mut().zip(r.final_kappa.weights()) {
            *a += b / runs as f64;
        }
    }
    let mse = results.iter().map(|r| r.sq_error).sum::<f64>() / runs as f64;
    (k, mse)
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
