//! Unconstrained minimisers: BFGS with a strong-Wolfe line search for smooth
//! objectives, and Levenberg-Marquardt for nonlinear least squares.
//!
//! Constraints are handled by the callers through reparameterisation, so both
//! routines work on all of R^n. An objective may return a non-finite value to
//! mark a point as infeasible; the line search then backs off.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_in_place, cholesky_solve};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when the gradient infinity-norm drops below this.
    pub gtol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 2000, gtol: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }

    pub fn gradient_norm(&self) -> f64 {
        inf_norm(&self.gradient)
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x, g);
        if v.is_finite() && g.iter().all(|x| x.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }
}

/// Minimises `f` starting at `x0`. `f` returns the objective and writes the
/// gradient into its second argument.
pub fn bfgs<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    if !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            gradient: g,
            iterations: 0,
            evaluations: obj.evals,
            termination: Termination::NonFiniteStart,
        };
    }

    // Inverse Hessian approximation, dense row-major.
    let mut h = identity(n);
    let mut fresh = true;
    let mut p = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut hy = vec![0.0; n];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.gtol {
            termination = Termination::GradientTolerance;
            break;
        }
        iterations += 1;
        for i in 0..n {
            p[i] = -dot(&h[i * n..(i + 1) * n], &g);
        }
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi = -gi);
            slope = dot(&p, &g);
        }
        let alpha0 = if fresh { (1.0 / inf_norm(&p)).min(1.0) } else { 1.0 };
        let found = line_search(&mut obj, &x, fx, &p, slope, alpha0, &mut x_new, &mut g_new);
        let Some(f_new) = found else {
            if fresh {
                termination = Termination::LineSearchFailed;
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };

        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * crate::math::sqrt(dot(&s, &s) * dot(&y, &y)) {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            let rho = 1.0 / sy;
            for i in 0..n {
                hy[i] = dot(&h[i * n..(i + 1) * n], &y);
            }
            let yhy = dot(&y, &hy);
            let coef = (1.0 + rho * yhy) * rho;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
            fresh = false;
        }
        core::mem::swap(&mut x, &mut x_new);
        core::mem::swap(&mut g, &mut g_new);
        fx = f_new;
    }
    if termination == Termination::MaxIterations && inf_norm(&g) < opts.gtol {
        termination = Termination::GradientTolerance;
    }
    Minimum { x, value: fx, gradient: g, iterations, evaluations: obj.evals, termination }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe line search (bracket then zoom). On success `x_out`/`g_out`
/// hold the accepted point. Falls back to the best sufficient-decrease point
/// when the curvature condition cannot be met.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    obj: &mut Counted<F>,
    x: &[f64],
    f0: f64,
    p: &[f64],
    slope0: f64,
    alpha0: f64,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
    let mut phi = |alpha: f64, xt: &mut Vec<f64>, gt: &mut Vec<f64>| -> (f64, f64) {
        for i in 0..n {
            xt[i] = x[i] + alpha * p[i];
        }
        let v = obj.eval(xt, gt);
        (v, if v.is_finite() { dot(gt, p) } else { f64::NAN })
    };
    let keep = |best: &mut Option<(f64, f64, Vec<f64>, Vec<f64>)>, alpha: f64, v: f64, xt: &[f64], gt: &[f64]| {
        if v.is_finite() && v < f0 && best.as_ref().map_or(true, |b| v < b.1) {
            *best = Some((alpha, v, xt.to_vec(), gt.to_vec()));
        }
    };

    // Values within `noise` of each other are not distinguished; near an
    // optimum the decrease is below rounding and only the slope is usable.
    let noise = 1e-11 * (1.0 + f0.abs());
    let worse = |alpha: f64, v: f64, f_lo: f64| {
        !v.is_finite() || (v > f0 + C1 * alpha * slope0 && v > f0 + noise) || v > f_lo + noise
    };
    let (mut lo, mut f_lo, mut d_lo) = (0.0, f0, slope0);
    let (mut hi, mut f_hi, mut d_hi) = (f64::NAN, f64::NAN, f64::NAN);
    let mut alpha = alpha0;
    let mut bracketed = false;
    for _ in 0..30 {
        let (v, d) = phi(alpha, &mut xt, &mut gt);
        keep(&mut best, alpha, v, &xt, &gt);
        if worse(alpha, v, f_lo) {
            (hi, f_hi, d_hi) = (alpha, v, d);
            bracketed = true;
            break;
        }
        if d.abs() <= -C2 * slope0 {
            x_out.copy_from_slice(&xt);
            g_out.copy_from_slice(&gt);
            return Some(v);
        }
        if d >= 0.0 {
            (hi, f_hi, d_hi) = (lo, f_lo, d_lo);
            (lo, f_lo, d_lo) = (alpha, v, d);
            bracketed = true;
            break;
        }
        (lo, f_lo, d_lo) = (alpha, v, d);
        alpha *= 2.0;
    }

    if bracketed {
        for _ in 0..20 {
            let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let width = b - a;
            if !(width > 1e-16 * b.abs().max(1e-300)) {
                break;
            }
            let t = interpolate(lo, f_lo, d_lo, hi, f_hi, d_hi).clamp(a + 0.1 * width, b - 0.1 * width);
            let (v, d) = phi(t, &mut xt, &mut gt);
            keep(&mut best, t, v, &xt, &gt);
            if worse(t, v, f_lo) {
                (hi, f_hi, d_hi) = (t, v, d);
            } else {
                if d.abs() <= -C2 * slope0 {
                    x_out.copy_from_slice(&xt);
                    g_out.copy_from_slice(&gt);
                    return Some(v);
                }
                if d * (hi - lo) >= 0.0 {
                    (hi, f_hi, d_hi) = (lo, f_lo, d_lo);
                }
                (lo, f_lo, d_lo) = (t, v, d);
            }
        }
    }

    let (_, v, xb, gb) = best?;
    x_out.copy_from_slice(&xb);
    g_out.copy_from_slice(&gb);
    Some(v)
}

/// Cubic interpolation between two bracket ends, falling back to a quadratic
/// or to bisection when the far end carries no usable derivative or value.
fn interpolate(lo: f64, f_lo: f64, d_lo: f64, hi: f64, f_hi: f64, d_hi: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    if !f_hi.is_finite() {
        return mid;
    }
    let dx = hi - lo;
    if d_hi.is_finite() {
        let d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (lo - hi);
        let disc = d1 * d1 - d_lo * d_hi;
        if disc >= 0.0 {
            let d2 = dx.signum() * crate::math::sqrt(disc);
            let t = hi - dx * (d_hi + d2 - d1) / (d_hi - d_lo + 2.0 * d2);
            if t.is_finite() {
                return t;
            }
        }
    }
    let denom = 2.0 * (f_hi - f_lo - d_lo * dx);
    if denom > 0.0 {
        let t = lo - d_lo * dx * dx / denom;
        if t.is_finite() {
            return t;
        }
    }
    mid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Convergence when `|grad SSR|_inf < gtol_rel * (1 + SSR)`.
    pub gtol_rel: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 500, gtol_rel: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresMinimum {
    pub x: Vec<f64>,
    pub ssr: f64,
    /// Gradient of the sum of squared residuals.
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg-Marquardt on `SSR(x) = sum r_i(x)^2`.
///
/// `model(x, r, jac)` fills the residuals and the row-major `m x n` Jacobian
/// `d r / d x`, returning `false` when `x` is infeasible.
pub fn levenberg_marquardt<F>(mut model: F, x0: &[f64], m: usize, opts: &LmOptions) -> LeastSquaresMinimum
where
    F: FnMut(&[f64], &mut [f64], &mut [f64]) -> bool,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut r_try = vec![0.0; m];
    let mut jac_try = vec![0.0; m * n];
    let ok = model(&x, &mut r, &mut jac);
    let mut ssr = if ok { dot(&r, &r) } else { f64::INFINITY };
    let mut jtj = vec![0.0; n * n];
    let mut grad = vec![0.0; n];
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut converged = false;
    if !ssr.is_finite() {
        return LeastSquaresMinimum { x, ssr, gradient: vec![f64::NAN; n], iterations, converged };
    }
    normal_equations(&jac, &r, m, n, &mut jtj, &mut grad);

    while iterations < opts.max_iter {
        if inf_norm(&grad) < opts.gtol_rel * (1.0 + ssr) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut step_taken = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..n {
                let d = jtj[i * n + i].max(1e-12);
                a[i * n + i] += lambda * d;
            }
            // a * delta = -grad / 2
            let mut delta: Vec<f64> = grad.iter().map(|g| -0.5 * g).collect();
            if cholesky_in_place(&mut a, n).is_err() {
                lambda *= nu;
                nu *= 2.0;
                continue;
            }
            cholesky_solve(&a, n, &mut delta);
            let x_try: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let ok = model(&x_try, &mut r_try, &mut jac_try);
            let ssr_try = if ok { dot(&r_try, &r_try) } else { f64::INFINITY };
            // Gain ratio against the linearised model.
            let predicted: f64 = delta
                .iter()
                .enumerate()
                .map(|(i, d)| d * (lambda * jtj[i * n + i].max(1e-12) * d - 0.5 * grad[i]))
                .sum();
            let rho = (ssr - ssr_try) / predicted.max(1e-300);
            if ssr_try.is_finite() && ssr_try < ssr {
                x = x_try;
                core::mem::swap(&mut r, &mut r_try);
                core::mem::swap(&mut jac, &mut jac_try);
                ssr = ssr_try;
                normal_equations(&jac, &r, m, n, &mut jtj, &mut grad);
                let t = 2.0 * rho - 1.0;
                lambda *= (1.0 / 3.0f64).max(1.0 - t * t * t);
                nu = 2.0;
                step_taken = true;
                break;
            }
            let tiny = delta.iter().zip(&x).all(|(d, xi)| d.abs() <= 1e-15 * (1.0 + xi.abs()));
            if tiny {
                break;
            }
            lambda *= nu;
            nu *= 2.0;
        }
        if !step_taken {
            converged = inf_norm(&grad) < opts.gtol_rel * (1.0 + ssr);
            break;
        }
    }
    LeastSquaresMinimum { x, ssr, gradient: grad, iterations, converged }
}

/// `jtj = J'J`, `grad = 2 J'r`.
pub(crate) fn normal_equations(jac: &[f64], r: &[f64], m: usize, n: usize, jtj: &mut [f64], grad: &mut [f64]) {
    jtj.iter_mut().for_each(|v| *v = 0.0);
    grad.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..m {
        let row = &jac[k * n..(k + 1) * n];
        for i in 0..n {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            grad[i] += 2.0 * ri * r[k];
            for j in 0..=i {
                jtj[i * n + j] += ri * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            jtj[j * n + i] = jtj[i * n + j];
        }
    }
}
