//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};

/// Consecutive iterations that change neither f nor the best gradient norm
/// before giving up.
const MAX_FLAT: usize = 20;
/// Roundoff allowance on f, in units of machine epsilon times |f|.
const FLAT_NOISE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iter: usize,
    /// Stop once `‖∇f‖₂ < tol`.
    pub tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iter: 800,
            tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimise `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite objective at the starting point".into(),
        ));
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iterations = 0;
    let mut flat = 0;
    let mut best_gnorm = f64::INFINITY;
    while iterations < cfg.max_iter {
        if l2_norm(&g) < cfg.tol {
            break;
        }
        let mut d = two_loop(&g, &hist);
        if dot(&d, &g) >= 0.0 {
            // lost descent; restart from steepest descent
            hist.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let first = hist.is_empty() && iterations == 0;
        let a0 = if first {
            (1.0 / l2_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let Some((alpha, fnew, gnew)) = line_search(&mut f, &x, fx, &g, &d, a0, cfg) else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let sy = dot(&s, &y);
        if sy > 1e-12 * l2_norm(&s) * l2_norm(&y) {
            if hist.len() == cfg.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let gnorm = l2_norm(&gnew);
        if (fx - fnew).abs() <= f64::EPSILON * fx.abs().max(1.0) && gnorm >= best_gnorm {
            flat += 1;
        } else {
            flat = 0;
        }
        best_gnorm = best_gnorm.min(gnorm);
        fx = fnew;
        g = gnew;
        if flat >= MAX_FLAT && l2_norm(&g) >= cfg.tol {
            break;
        }
    }
    let grad_norm = l2_norm(&g);
    Ok(LbfgsResult {
        x,
        value: fx,
        grad_norm,
        iterations,
        converged: grad_norm < cfg.tol,
    })
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; hist.len()];
    for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[k] = a;
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (k, (s, y, rho)) in hist.iter().enumerate() {
        let b = rho * dot(y, &q);
        q.iter_mut()
            .zip(s)
            .for_each(|(qi, si)| *qi += (alphas[k] - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Bracketing and zoom phases of the strong-Wolfe search, using cubic
/// interpolation safeguarded to the interior of the bracket.
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    a0: f64,
    cfg: &LbfgsConfig,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let dg0 = dot(g0, d);
    let noise = FLAT_NOISE * f64::EPSILON * f0.abs().max(1.0);
    // approximate Wolfe: once f differences sink into roundoff, decide on the slope
    let decreased = |a: f64, fa: f64, dga: f64| {
        fa <= f0 + cfg.c1 * a * dg0 || (fa <= f0 + noise && dga <= (2.0 * cfg.c1 - 1.0) * dg0)
    };
    let mut eval = |a: f64| {
        let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        let (fa, ga) = f(&xa);
        let dga = dot(&ga, d);
        (fa, ga, dga)
    };
    let (mut a_prev, mut f_prev, mut dg_prev) = (0.0, f0, dg0);
    let mut a = a0;
    for i in 0..cfg.max_line_search {
        let (fa, ga, dga) = eval(a);
        if !fa.is_finite() {
            a = 0.5 * (a_prev + a);
            continue;
        }
        if !decreased(a, fa, dga) || (i > 0 && fa >= f_prev + noise) {
            return zoom(
                &mut eval,
                &decreased,
                noise,
                dg0,
                (a_prev, f_prev, dg_prev),
                (a, fa, dga),
                cfg,
            );
        }
        if dga.abs() <= -cfg.c2 * dg0 {
            return Some((a, fa, ga));
        }
        if dga >= 0.0 {
            return zoom(
                &mut eval,
                &decreased,
                noise,
                dg0,
                (a, fa, dga),
                (a_prev, f_prev, dg_prev),
                cfg,
            );
        }
        (a_prev, f_prev, dg_prev) = (a, fa, dga);
        a *= 2.0;
    }
    None
}

fn zoom<E, D>(
    eval: &mut E,
    decreased: &D,
    noise: f64,
    dg0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    cfg: &LbfgsConfig,
) -> Option<(f64, f64, Vec<f64>)>
where
    E: FnMut(f64) -> (f64, Vec<f64>, f64),
    D: Fn(f64, f64, f64) -> bool,
{
    for _ in 0..cfg.max_line_search {
        let (left, right) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let width = right - left;
        if width < 1e-16 * right.max(1.0) {
            break;
        }
        let mut a = cubic_min(lo, hi).unwrap_or(0.5 * (lo.0 + hi.0));
        if !(a > left + 0.1 * width && a < right - 0.1 * width) {
            a = 0.5 * (lo.0 + hi.0);
        }
        let (fa, ga, dga) = eval(a);
        if !fa.is_finite() || !decreased(a, fa, dga) || fa >= lo.1 + noise {
            hi = (a, fa, dga);
        } else {
            if dga.abs() <= -cfg.c2 * dg0 {
                return Some((a, fa, ga));
            }
            if dga * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, dga);
        }
    }
    // accept the best sufficient-decrease point if the bracket collapsed
    if lo.0 > 0.0 {
        let (fa, ga, _) = eval(lo.0);
        return Some((lo.0, fa, ga));
    }
    None
}

fn cubic_min(p: (f64, f64, f64), q: (f64, f64, f64)) -> Option<f64> {
    let (a, fa, da) = p;
    let (b, fb, db) = q;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_exact() {
        let diag = [1.0, 10.0, 100.0];
        let f = |x: &[f64]| {
            let v = x
                .iter()
                .zip(diag)
                .map(|(xi, d)| 0.5 * d * (xi - 1.0).powi(2))
                .sum();
            (
                v,
                x.iter().zip(diag).map(|(xi, d)| d * (xi - 1.0)).collect(),
            )
        };
        let r = minimize(f, vec![0.0; 3], &LbfgsConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations < 20);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn converges_below_objective_roundoff() {
        // the offset hides the last decreases in f; only the slope is informative
        let diag: Vec<f64> = (0..40).map(|i| 1.0 + (i as f64).powi(2)).collect();
        let f = |x: &[f64]| {
            let v = 1e8
                + x.iter()
                    .zip(&diag)
                    .map(|(xi, d)| 0.5 * d * (xi - 0.3).powi(2) + (1.0 + xi * xi).ln())
                    .sum::<f64>();
            let g = x
                .iter()
                .zip(&diag)
                .map(|(xi, d)| d * (xi - 0.3) + 2.0 * xi / (1.0 + xi * xi))
                .collect();
            (v, g)
        };
        let r = minimize(f, vec![2.0; 40], &LbfgsConfig::default()).unwrap();
        assert!(r.converged && r.grad_norm < 1e-6, "{r:?}");
    }

    #[test]
    fn already_optimal() {
        let r = minimize(
            |x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]),
            vec![0.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
    }

    #[test]
    fn rejects_nan_start() {
        assert!(minimize(
            |_: &[f64]| (f64::NAN, vec![0.0]),
            vec![0.0],
            &LbfgsConfig::default()
        )
        .is_err());
    }
}
