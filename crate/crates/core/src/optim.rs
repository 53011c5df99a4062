//! Quasi-Newton minimization (BFGS, inverse-Hessian form) with a line search
//! enforcing the strong Wolfe conditions.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop once `max |∇f| ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop once `|f_k − f_{k+1}| ≤ rel_tol · |f_k|` on [`STALL_ITERATIONS`]
    /// consecutive iterations.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            rel_tol: 1e-9,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientNorm,
    RelativeChange,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

impl BfgsOutcome {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::GradientNorm | Termination::RelativeChange
        )
    }

    pub fn grad_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

/// A single small step is common far from the optimum in high dimension, so
/// the relative-change test must hold this many times in a row.
pub const STALL_ITERATIONS: usize = 3;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective`, which returns the value and gradient at a point.
/// Non-finite values are treated as `+∞` by the line search.
pub fn minimize<F>(mut objective: F, x0: Vec<f64>, opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = objective(&x);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsOutcome {
            x,
            f,
            grad: g,
            iterations: 0,
            termination: Termination::NonFiniteStart,
        };
    }
    if n == 0 || inf_norm(&g) <= opts.grad_tol {
        return BfgsOutcome {
            x,
            f,
            grad: g,
            iterations: 0,
            termination: Termination::GradientNorm,
        };
    }

    let mut h = identity(n);
    let mut fresh = true;
    let mut stalled = 0;
    for iter in 1..=opts.max_iter {
        let mut p = mat_vec(&h, &g);
        p.iter_mut().for_each(|v| *v = -*v);
        let mut d0 = dot(&p, &g);
        if d0 >= 0.0 || !d0.is_finite() {
            // Lost descent; fall back to steepest descent.
            h = identity(n);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            d0 = dot(&p, &g);
        }
        let step0 = if fresh {
            (1.0 / inf_norm(&p)).min(1.0)
        } else {
            1.0
        };
        let ls = line_search(&mut objective, &x, f, &g, &p, d0, step0);
        let Some((alpha, f_new, g_new)) = ls else {
            if !fresh {
                h = identity(n);
                fresh = true;
                continue;
            }
            return BfgsOutcome {
                x,
                f,
                grad: g,
                iterations: iter,
                termination: Termination::LineSearchFailed,
            };
        };
        let s: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let f_old = f;
        f = f_new;
        g = g_new;

        if inf_norm(&g) <= opts.grad_tol {
            return BfgsOutcome {
                x,
                f,
                grad: g,
                iterations: iter,
                termination: Termination::GradientNorm,
            };
        }
        if (f_old - f).abs() <= opts.rel_tol * f_old.abs().max(1e-300) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if stalled >= STALL_ITERATIONS {
            return BfgsOutcome {
                x,
                f,
                grad: g,
                iterations: iter,
                termination: Termination::RelativeChange,
            };
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
    }
    BfgsOutcome {
        x,
        f,
        grad: g,
        iterations: opts.max_iter,
        termination: Termination::MaxIterations,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn mat_vec(h: &[f64], v: &[f64]) -> Vec<f64> {
    h.chunks(v.len()).map(|row| dot(row, v)).collect()
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let c = rho * rho * yhy + rho;
    for i in 0..n {
        let row = &mut h[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Returns `(step, f, grad)` satisfying the strong Wolfe conditions, or the best
/// sufficient-decrease point found if the curvature condition could not be met.
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    f0: f64,
    _g0: &[f64],
    p: &[f64],
    d0: f64,
    step0: f64,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut eval = |a: f64| {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect();
        let (fa, ga) = objective(&xa);
        let da = dot(&ga, p);
        if fa.is_finite() && da.is_finite() {
            (fa, da, ga)
        } else {
            (f64::INFINITY, f64::NAN, ga)
        }
    };
    let armijo = |a: f64, fa: f64| fa <= f0 + C1 * a * d0;

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let keep = |a: f64, fa: f64, ga: &Vec<f64>, best: &mut Option<(f64, f64, Vec<f64>)>| {
        if armijo(a, fa) && best.as_ref().is_none_or(|b| fa < b.1) {
            *best = Some((a, fa, ga.clone()));
        }
    };

    let (mut a_lo, mut f_lo, mut d_lo) = (0.0, f0, d0);
    let mut a = step0;
    let mut bracket: Option<(f64, f64, f64)> = None;
    for i in 0..40 {
        let (fa, da, ga) = eval(a);
        keep(a, fa, &ga, &mut best);
        if !armijo(a, fa) || (i > 0 && fa >= f_lo) {
            bracket = Some((a, fa, da));
            break;
        }
        if da.abs() <= -C2 * d0 {
            return Some((a, fa, ga));
        }
        if da >= 0.0 {
            // Minimum lies between the current and previous step.
            let (old_a, old_f, old_d) = (a_lo, f_lo, d_lo);
            a_lo = a;
            f_lo = fa;
            d_lo = da;
            bracket = Some((old_a, old_f, old_d));
            break;
        }
        a_lo = a;
        f_lo = fa;
        d_lo = da;
        a *= 2.0;
    }
    let Some((mut a_hi, mut f_hi, mut _d_hi)) = bracket else {
        return best;
    };

    for _ in 0..40 {
        let (lo, hi) = (a_lo.min(a_hi), a_lo.max(a_hi));
        let width = hi - lo;
        if width <= 1e-16 * hi.max(1e-300) {
            break;
        }
        // Safeguarded quadratic interpolation from (a_lo, f_lo, d_lo) and f_hi.
        let mut trial = if f_hi.is_finite() {
            let dx = a_hi - a_lo;
            let denom = 2.0 * (f_hi - f_lo - d_lo * dx);
            if denom > 0.0 {
                a_lo - d_lo * dx * dx / denom
            } else {
                0.5 * (a_lo + a_hi)
            }
        } else {
            0.5 * (a_lo + a_hi)
        };
        if !(trial > lo + 0.1 * width && trial < hi - 0.1 * width) {
            trial = 0.5 * (lo + hi);
        }
        let (ft, dt, gt) = eval(trial);
        keep(trial, ft, &gt, &mut best);
        if !armijo(trial, ft) || ft >= f_lo {
            a_hi = trial;
            f_hi = ft;
            _d_hi = dt;
        } else {
            if dt.abs() <= -C2 * d0 {
                return Some((trial, ft, gt));
            }
            if dt * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
                _d_hi = d_lo;
            }
            a_lo = trial;
            f_lo = ft;
            d_lo = dt;
        }
    }
    best
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
        let out = minimize(
            rosenbrock,
            vec![-1.2, 1.0],
            &BfgsOptions {
                grad_tol: 1e-8,
                rel_tol: 0.0,
                max_iter: 500,
            },
        );
        assert!(out.converged(), "{:?}", out.termination);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges_superlinearly() {
        // Ill-conditioned diagonal quadratic in 10 dimensions.
        let f = |x: &[f64]| {
            let v: f64 = x.iter().enumerate().map(|(i, xi)| (i + 1) as f64 * xi * xi).sum();
            let g = x.iter().enumerate().map(|(i, xi)| 2.0 * (i + 1) as f64 * xi).collect();
            (v, g)
        };
        let out = minimize(f, vec![1.0; 10], &BfgsOptions { rel_tol: 0.0, ..Default::default() });
        assert_eq!(out.termination, Termination::GradientNorm);
        assert!(out.iterations < 40, "{}", out.iterations);
    }

    #[test]
    fn non_finite_start_is_reported() {
        let out = minimize(|_| (f64::NAN, vec![0.0]), vec![0.0], &BfgsOptions::default());
        assert_eq!(out.termination, Termination::NonFiniteStart);
    }

    #[test]
    fn handles_infinite_region() {
        // f = x - ln(x) is +∞ for x ≤ 0; minimum at x = 1.
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![f64::NAN])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        };
        let out = minimize(f, vec![5.0], &BfgsOptions { rel_tol: 0.0, ..Default::default() });
        assert!(out.converged());
        assert!((out.x[0] - 1.0).abs() < 1e-6);
    }
}
