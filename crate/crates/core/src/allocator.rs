//! Simplex geometry: feasible regions, Euclidean projection, variance
//! minimization over the simplex and integer sample allocation.

use crate::error::{OmsError, Result};
use crate::nelder_mead::{self, NmOptions};
use crate::variance::SelectionRatio;

/// Euclidean projection onto the probability simplex (sort-based).
pub fn simplex_project(v: &[f64]) -> SelectionRatio {
    SelectionRatio::from_weights_unchecked(project_raw(v))
}

fn project_raw(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut u: Vec<f64> = v.iter().map(|x| if x.is_nan() { 0.0 } else { *x }).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            tau = t;
        }
    }
    let mut out: Vec<f64> = v
        .iter()
        .map(|x| if x.is_nan() { 0.0 } else { (x - tau).max(0.0) })
        .collect();
    // Remove the rounding residue so the weights sum to one.
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|x| *x /= s);
    } else {
        out = vec![1.0 / n as f64; n];
    }
    out
}

/// The set of final selection ratios still reachable after part of the
/// budget has been committed at ratio `anchor`.
///
/// Every kind is `{ (ρ·u·κ0 + w·κ) / (ρ·u + w) : κ ∈ Δ }` with `u = κᵀc` and
/// `w = κ0ᵀc`. Without costs (or with equal costs) `u = w` and the region is
/// the affine image `{ (ρ·κ0 + κ) / (ρ + 1) }`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleRegion {
    pub kind: RegionKind,
    pub anchor: SelectionRatio,
    /// Committed-to-remaining ratio `ρ` (samples, or spend for cost kinds).
    pub rho: f64,
    pub costs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Etc,
    Round,
    CostEtc,
    CostRound,
}

impl FeasibleRegion {
    /// `{ e·κ0 + (1 − e)·κ }`.
    pub fn etc(e: f64, kappa_explore: SelectionRatio) -> Result<Self> {
        check_fraction(e)?;
        Ok(Self::build(RegionKind::Etc, kappa_explore, e / (1.0 - e), None))
    }

    /// `{ (j·κ0 + κ) / (j + 1) }`; `j` may be fractional when batches differ in size.
    pub fn round(j: f64, kappa_current: SelectionRatio) -> Result<Self> {
        check_weight(j)?;
        Ok(Self::build(RegionKind::Round, kappa_current, j, None))
    }

    /// Spend fraction `e` already paid at `κ0`, the rest spent at `κ`.
    pub fn cost_etc(e: f64, kappa_explore: SelectionRatio, costs: &[f64]) -> Result<Self> {
        check_fraction(e)?;
        check_costs(costs, kappa_explore.len())?;
        Ok(Self::build(
            RegionKind::CostEtc,
            kappa_explore,
            e / (1.0 - e),
            Some(costs.to_vec()),
        ))
    }

    /// Spend `j` times the next round's budget already paid at `κ0`.
    pub fn cost_round(j: f64, kappa_current: SelectionRatio, costs: &[f64]) -> Result<Self> {
        check_weight(j)?;
        check_costs(costs, kappa_current.len())?;
        Ok(Self::build(
            RegionKind::CostRound,
            kappa_current,
            j,
            Some(costs.to_vec()),
        ))
    }

    fn build(kind: RegionKind, anchor: SelectionRatio, rho: f64, costs: Option<Vec<f64>>) -> Self {
        let costs = costs.filter(|c| c.iter().any(|x| *x != c[0]));
        FeasibleRegion {
            kind,
            anchor,
            rho,
            costs,
        }
    }

    pub fn dims(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_affine(&self) -> bool {
        self.costs.is_none()
    }

    /// Maps a simplex point to the region.
    pub fn image(&self, kappa: &[f64]) -> Vec<f64> {
        let k0 = self.anchor.weights();
        match &self.costs {
            None => {
                let d = 1.0 + self.rho;
                k0.iter()
                    .zip(kappa)
                    .map(|(a, k)| (self.rho * a + k) / d)
                    .collect()
            }
            Some(c) => {
                let u: f64 = kappa.iter().zip(c).map(|(a, b)| a * b).sum();
                let w = self.anchor.dot(c);
                let d = self.rho * u + w;
                k0.iter()
                    .zip(kappa)
                    .map(|(a, k)| (self.rho * u * a + w * k) / d)
                    .collect()
            }
        }
    }

    /// The simplex point whose image is `p`, if `p` can be an image at all.
    pub fn preimage(&self, p: &[f64]) -> Option<Vec<f64>> {
        let k0 = self.anchor.weights();
        match &self.costs {
            None => Some(
                p.iter()
                    .zip(k0)
                    .map(|(x, a)| x * (1.0 + self.rho) - self.rho * a)
                    .collect(),
            ),
            Some(c) => {
                let w = self.anchor.dot(c);
                let pc: f64 = p.iter().zip(c).map(|(a, b)| a * b).sum();
                let den = w * (1.0 + self.rho) - self.rho * pc;
                if den.is_nan() || den <= 0.0 {
                    return None;
                }
                let u = pc * w / den;
                Some(
                    p.iter()
                        .zip(k0)
                        .map(|(x, a)| (x * (self.rho * u + w) - self.rho * u * a) / w)
                        .collect(),
                )
            }
        }
    }

    /// Region membership: the preimage lies on the simplex within `tol`.
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        match self.preimage(p) {
            Some(k) => {
                k.iter().all(|x| *x >= -tol) && (k.iter().sum::<f64>() - 1.0).abs() <= tol
            }
            None => false,
        }
    }

    /// Closest region member to `target` in Euclidean norm.
    pub fn project(&self, target: &SelectionRatio) -> SelectionRatio {
        let t = target.weights();
        match &self.costs {
            None => {
                let b = 1.0 / (1.0 + self.rho);
                let shifted: Vec<f64> = t
                    .iter()
                    .zip(self.anchor.weights())
                    .map(|(x, a)| (x - self.rho * a * b) / b)
                    .collect();
                let k = project_raw(&shifted);
                SelectionRatio::from_weights_unchecked(self.image(&k))
            }
            Some(_) => self.project_nonlinear(t),
        }
    }

    fn project_nonlinear(&self, t: &[f64]) -> SelectionRatio {
        let n = self.dims();
        let dist = |k: &[f64]| -> f64 {
            self.image(k)
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let per_dim = if n <= 3 { 200 } else { 20 };
        let mut best_k: Vec<f64> = Vec::new();
        let mut best_d = f64::INFINITY;
        for_each_lattice(n, per_dim - 1, |k| {
            let d = dist(k);
            if d < best_d {
                best_d = d;
                best_k = k.to_vec();
            }
        });
        let refined = refine(&dist, &best_k, 1.0 / (per_dim - 1) as f64);
        let (k, _) = if refined.1 < best_d {
            refined
        } else {
            (best_k, best_d)
        };
        SelectionRatio::from_weights_unchecked(normalize_sum(self.image(&k)))
    }
}

fn normalize_sum(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn check_fraction(e: f64) -> Result<()> {
    if !(e > 0.0 && e < 1.0) {
        return Err(OmsError::config(format!("fraction {e} must lie in (0, 1)")));
    }
    Ok(())
}

fn check_weight(j: f64) -> Result<()> {
    if !(j.is_finite() && j > 0.0) {
        return Err(OmsError::config(format!("round weight {j} must be positive")));
    }
    Ok(())
}

fn check_costs(costs: &[f64], n: usize) -> Result<()> {
    if costs.len() != n || costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(OmsError::config(format!(
            "costs {costs:?} must be {n} strictly positive numbers"
        )));
    }
    Ok(())
}

/// Visits every simplex point whose coordinates are multiples of `1/steps`,
/// in lexicographic order of the leading coordinates.
pub fn for_each_lattice<F: FnMut(&[f64])>(dims: usize, steps: usize, mut f: F) {
    let mut counts = vec![0usize; dims];
    let mut point = vec![0.0; dims];
    fn rec<F: FnMut(&[f64])>(
        i: usize,
        left: usize,
        steps: usize,
        counts: &mut [usize],
        point: &mut [f64],
        f: &mut F,
    ) {
        let dims = counts.len();
        if i + 1 == dims {
            counts[i] = left;
            for (p, c) in point.iter_mut().zip(counts.iter()) {
                *p = *c as f64 / steps as f64;
            }
            f(point);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, steps, counts, point, f);
        }
    }
    rec(0, steps, steps, &mut counts, &mut point, &mut f);
}

const REFINE_OPTS: NmOptions = NmOptions {
    max_iter: 300,
    f_tol: 1e-12,
    x_tol: 1e-8,
};

/// Nelder–Mead over the leading `dims − 1` coordinates; the last is
/// `1 − Σ` and the point is projected onto the simplex before evaluation.
fn refine<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], step: f64) -> (Vec<f64>, f64) {
    let n = start.len();
    let lift = |x: &[f64]| -> Vec<f64> {
        let mut v = x.to_vec();
        v.push(1.0 - x.iter().sum::<f64>());
        project_raw(&v)
    };
    let r = nelder_mead::minimize(
        |x| f(&lift(x)),
        &start[..n - 1],
        &vec![step; n - 1],
        |_| {},
        REFINE_OPTS,
    );
    let k = lift(&r.x);
    let v = f(&k);
    (k, if v.is_nan() { f64::INFINITY } else { v })
}

/// `argmin_κ objective(κ)` over the simplex: lattice scan (step 0.02 for up
/// to three sources, 0.05 for four or five), then Nelder–Mead refinement of
/// the best five lattice points. `+∞` marks infeasible points.
pub fn minimize_over_simplex<F: Fn(&[f64]) -> f64>(objective: F, dims: usize) -> Result<SelectionRatio> {
    let steps = match dims {
        2 | 3 => 50,
        4 | 5 => 20,
        _ => {
            return Err(OmsError::config(format!(
                "simplex search supports 2 to 5 sources, got {dims}"
            )))
        }
    };
    let eval = |k: &[f64]| {
        let v = objective(k);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut lattice: Vec<(f64, Vec<f64>)> = Vec::new();
    for_each_lattice(dims, steps, |k| lattice.push((eval(k), k.to_vec())));
    // Stable sort keeps lattice order among equal values.
    lattice.sort_by(|a, b| a.0.total_cmp(&b.0));
    if !lattice[0].0.is_finite() {
        return Err(OmsError::DegenerateObjective);
    }
    let (mut best_v, mut best_k) = (lattice[0].0, lattice[0].1.clone());
    for (v0, k0) in lattice.iter().take(5) {
        if !v0.is_finite() {
            break;
        }
        let (k, v) = refine(&eval, k0, 1.0 / steps as f64);
        if v < best_v {
            best_v = v;
            best_k = k;
        }
    }
    Ok(SelectionRatio::from_weights_unchecked(best_k))
}

/// Adds `n_new` samples to `counts_so_far` so that the resulting ratio is as
/// close as possible to `target` in ℓ∞: one sample at a time to the source
/// with the largest shortfall `target_i·N − x_i`, ties to the lowest index.
pub fn integer_allocate(target: &SelectionRatio, counts_so_far: &[usize], n_new: usize) -> Vec<usize> {
    let total = (counts_so_far.iter().sum::<usize>() + n_new) as f64;
    let goal: Vec<f64> = target.weights().iter().map(|t| t * total).collect();
    let mut x: Vec<usize> = counts_so_far.to_vec();
    let mut add = vec![0usize; x.len()];
    for _ in 0..n_new {
        let i = argmax_shortfall(&goal, &x, |_| true);
        x[i] += 1;
        add[i] += 1;
    }
    add
}

fn argmax_shortfall<P: Fn(usize) -> bool>(goal: &[f64], x: &[usize], allowed: P) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..goal.len() {
        if !allowed(i) {
            continue;
        }
        let v = goal[i] - x[i] as f64;
        if best == usize::MAX || v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Query order for a batch: at step `k` take the source furthest behind its
/// pro-rata share `alloc_i·(k+1)/n`. A center batch comes out round-robin.
pub fn interleave(alloc: &[usize]) -> Vec<usize> {
    let n: usize = alloc.iter().sum();
    let mut done = vec![0usize; alloc.len()];
    let mut order = Vec::with_capacity(n);
    for k in 0..n {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &a) in alloc.iter().enumerate() {
            let v = a as f64 * (k + 1) as f64 / n as f64 - done[i] as f64;
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        done[best] += 1;
        order.push(best);
    }
    order
}

/// Relative slack allowed when comparing spend against a budget.
pub const BUDGET_EPS: f64 = 1e-9;

pub fn within_budget(cost: f64, cap: f64) -> bool {
    cost <= cap + BUDGET_EPS * cap.abs().max(1.0)
}

/// Samples to buy with at most `cap` more spend so that the final ratio
/// tracks `target`: size the purchase as `⌊(spent + cap)/(targetᵀc)⌋` total
/// records, shrink it until the integer allocation is affordable, then top
/// up one affordable sample at a time by largest shortfall.
pub fn spend_toward(target: &SelectionRatio, counts_so_far: &[usize], costs: &[f64], cap: f64) -> Vec<usize> {
    let cost_of = |a: &[usize]| -> f64 { a.iter().zip(costs).map(|(n, c)| *n as f64 * c).sum() };
    let n_done: usize = counts_so_far.iter().sum();
    let spent = cost_of(counts_so_far);
    let tc = target.dot(costs);
    let n_total = ((spent + cap) / tc * (1.0 + BUDGET_EPS)).floor() as usize;
    let mut n_new = n_total.saturating_sub(n_done);
    let mut add = vec![0usize; costs.len()];
    while n_new > 0 {
        let a = integer_allocate(target, counts_so_far, n_new);
        if within_budget(cost_of(&a), cap) {
            add = a;
            break;
        }
        n_new -= 1;
    }
    let mut left = cap - cost_of(&add);
    let mut x: Vec<usize> = counts_so_far.iter().zip(&add).map(|(a, b)| a + b).collect();
    loop {
        let affordable = |i: usize| within_budget(costs[i], left);
        if !(0..costs.len()).any(affordable) {
            break;
        }
        let total = (x.iter().sum::<usize>() + 1) as f64;
        let goal: Vec<f64> = target.weights().iter().map(|t| t * total).collect();
        let i = argmax_shortfall(&goal, &x, affordable);
        x[i] += 1;
        add[i] += 1;
        left -= costs[i];
    }
    add
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sr(v: &[f64]) -> SelectionRatio {
        SelectionRatio::new(v.to_vec()).unwrap()
    }

    #[test]
    fn project_examples() {
        assert_eq!(simplex_project(&[0.6, 0.6]).weights(), &[0.5, 0.5]);
        assert_eq!(simplex_project(&[2.0, -1.0, 0.0]).weights(), &[1.0, 0.0, 0.0]);
        let p = simplex_project(&[0.2, 0.3, 0.5]);
        assert!(p.linf_distance(&sr(&[0.2, 0.3, 0.5])) < 1e-15);
    }

    #[test]
    fn region_examples() {
        let etc = FeasibleRegion::etc(0.5, SelectionRatio::center(2)).unwrap();
        let p = etc.project(&sr(&[1.0, 0.0]));
        assert!(p.linf_distance(&sr(&[0.75, 0.25])) < 1e-12);
        let round = FeasibleRegion::round(1.0, SelectionRatio::center(2)).unwrap();
        let p = round.project(&sr(&[0.0, 1.0]));
        assert!(p.linf_distance(&sr(&[0.25, 0.75])) < 1e-12);
        let inside = sr(&[0.4, 0.6]);
        assert!(etc.project(&inside).linf_distance(&inside) < 1e-10);
    }

    #[test]
    fn cost_region_with_equal_costs_is_affine() {
        let r = FeasibleRegion::cost_etc(0.3, SelectionRatio::center(3), &[2.0, 2.0, 2.0]).unwrap();
        assert!(r.is_affine());
    }

    #[test]
    fn lattice_counts() {
        let mut n = 0;
        for_each_lattice(3, 50, |_| n += 1);
        assert_eq!(n, 51 * 52 / 2);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(integer_allocate(&SelectionRatio::center(2), &[0, 0], 3), vec![2, 1]);
        assert_eq!(integer_allocate(&sr(&[1.0, 0.0]), &[0, 5], 5), vec![5, 0]);
        assert_eq!(integer_allocate(&SelectionRatio::center(2), &[0, 0], 7), vec![4, 3]);
        assert_eq!(interleave(&[3, 2]), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn minimize_quadratic() {
        let k = minimize_over_simplex(|k| (k[0] - 0.3).powi(2) + (k[1] - 0.7).powi(2), 2).unwrap();
        assert!(k.linf_distance(&sr(&[0.3, 0.7])) < 1e-4);
        assert_eq!(
            minimize_over_simplex(|_| f64::INFINITY, 3),
            Err(OmsError::DegenerateObjective)
        );
    }

    #[test]
    fn spend_with_unit_costs_matches_allocation() {
        let t = sr(&[0.3, 0.7]);
        assert_eq!(spend_toward(&t, &[5, 5], &[1.0, 1.0], 40.0), integer_allocate(&t, &[5, 5], 40));
    }
}
