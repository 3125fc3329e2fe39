//! Derivative-free Nelder–Mead simplex search with a projection hook.
//!
//! Every trial point is passed through `project` before evaluation, which is
//! how box constraints (GMM) and simplex parametrizations (allocator) are
//! enforced. NaN objective values are treated as `+∞`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmOptions {
    pub max_iter: usize,
    /// Absolute tolerance on `max f − min f` over the simplex.
    pub f_tol: f64,
    /// Tolerance on the simplex diameter, relative to `1 + ‖x_best‖∞`.
    pub x_tol: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            max_iter: 2000,
            f_tol: 1e-12,
            x_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// The objective spread fell below `f_tol` before the iteration cap.
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

pub fn minimize<F, P>(mut f: F, x0: &[f64], step: &[f64], project: P, opts: NmOptions) -> NmResult
where
    F: FnMut(&[f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let n = x0.len();
    let mut eval = |x: &[f64]| sanitize(f(x));

    let mut start = x0.to_vec();
    project(&mut start);
    if n == 0 {
        let fx = eval(&start);
        return NmResult {
            x: start,
            f: fx,
            iterations: 0,
            converged: true,
        };
    }

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(start.clone());
    for i in 0..n {
        let mut p = start.clone();
        p[i] += step[i];
        project(&mut p);
        if (p[i] - start[i]).abs() < 0.5 * step[i].abs() {
            p = start.clone();
            p[i] -= step[i];
            project(&mut p);
        }
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();

    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    let mut iterations = 0;
    let converged;

    loop {
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let (best, second, worst) = (order[0], order[n - 1], order[n]);

        let spread = vals[worst] - vals[best];
        let spread_ok = spread.is_finite() && spread <= opts.f_tol
            || (vals[worst] == vals[best] && vals[best].is_finite());
        let scale = 1.0 + pts[best].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diameter = pts
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&pts[best])
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0f64, f64::max);
        if spread_ok && diameter <= opts.x_tol * scale {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            converged = spread_ok;
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in order.iter().take(n) {
            for (c, v) in centroid.iter_mut().zip(&pts[i]) {
                *c += v / n as f64;
            }
        }

        let along = |t: f64, out: &mut Vec<f64>| {
            for k in 0..n {
                out[k] = centroid[k] + t * (pts[worst][k] - centroid[k]);
            }
            project(out);
        };

        along(-1.0, &mut trial);
        let fr = eval(&trial);
        if fr < vals[best] {
            along(-2.0, &mut trial2);
            let fe = eval(&trial2);
            if fe < fr {
                pts[worst].copy_from_slice(&trial2);
                vals[worst] = fe;
            } else {
                pts[worst].copy_from_slice(&trial);
                vals[worst] = fr;
            }
            continue;
        }
        if fr < vals[second] {
            pts[worst].copy_from_slice(&trial);
            vals[worst] = fr;
            continue;
        }
        let (t, bound) = if fr < vals[worst] {
            (-0.5, fr)
        } else {
            (0.5, vals[worst])
        };
        along(t, &mut trial2);
        let fc = eval(&trial2);
        if fc < bound || (fc == bound && bound.is_finite()) {
            pts[worst].copy_from_slice(&trial2);
            vals[worst] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        let anchor = pts[best].clone();
        for &i in order.iter().skip(1) {
            for k in 0..n {
                pts[i][k] = anchor[k] + 0.5 * (pts[i][k] - anchor[k]);
            }
            project(&mut pts[i]);
            vals[i] = eval(&pts[i]);
        }
    }

    let best = order[0];
    NmResult {
        x: pts[best].clone(),
        f: vals[best],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(f, &[-1.2, 1.0], &[0.5, 0.5], |_| {}, NmOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{r:?}");
        assert!(r.converged);
    }

    #[test]
    fn respects_projection() {
        let f = |x: &[f64]| (x[0] - 5.0).powi(2);
        let clamp = |x: &mut [f64]| x[0] = x[0].clamp(-1.0, 1.0);
        let r = minimize(f, &[0.0], &[0.5], clamp, NmOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nan_is_infinite() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.5).powi(2) };
        let r = minimize(f, &[1.0], &[0.3], |_| {}, NmOptions::default());
        assert!((r.x[0] - 0.5).abs() < 1e-6);
    }
}
