//! Asymmetric multivariate GARCH(1,1) in diagonal (Hadamard) form:
//!
//! ```text
//! H_t = C'C + aa' * e e' + bb' * H_{t-1} + ss' * xi xi' + zz' * eta eta'
//! ```
//!
//! with all shock terms dated `t-1`, `*` the elementwise product, `xi_i = e_i`
//! when `e_i < 0` and `eta_i = e_i` when `|e_i| > sqrt(h_ii)` (zero otherwise).
//! The threshold for `eta` uses the conditional variance of the same date as
//! the shock, so every indicator is known one period ahead.
//!
//! Estimation maximises the Gaussian quasi-likelihood with BFGS on an
//! unconstrained reparameterisation. The gradient is computed exactly by a
//! reverse pass through the recursion.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{MonthIndex, MIN_SERIES_LEN};
use crate::linalg::{clip_eigenvalues, Matrix};
use crate::math;
use crate::optim::{bfgs, inf_norm, BfgsOptions};

/// Largest system handled by the recursion.
pub const MAX_DIM: usize = 4;

const ST: usize = MAX_DIM;
type Mat = [f64; ST * ST];
type Vect = [f64; ST];

/// Column order of a country system.
pub const COUNTRY: usize = 0;
pub const FX_DEV: usize = 1;
pub const FX_EMG: usize = 2;
pub const WORLD: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GarchError {
    #[error("{n} observations, at least {min} are required")]
    TooShort { n: usize, min: usize },
    #[error("column {column} is constant")]
    DegenerateData { column: usize },
    #[error("conditional covariance is singular at t = {t}")]
    SingularH { t: usize },
    #[error("non-finite value in the recursion at t = {t}")]
    NonFinite { t: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension {0} is not supported (1..={MAX_DIM})")]
    Dimension(usize),
    #[error("estimation did not reach the gradient tolerance")]
    NoConvergence,
}

/// Parameters of the mean equations and the covariance recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MGarchParams {
    /// Constant means, percent per month.
    pub alpha: Vec<f64>,
    /// Rows of the lower-triangular intercept factor `C`.
    pub c: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

impl MGarchParams {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// Symmetric-part persistence `a_i^2 + b_i^2 + s_i^2 / 2` of component `i`.
    pub fn persistence(&self, i: usize) -> f64 {
        self.a[i] * self.a[i] + self.b[i] * self.b[i] + 0.5 * self.s[i] * self.s[i]
    }

    pub fn validate(&self) -> Result<(), GarchError> {
        let n = self.dim();
        if n == 0 || n > MAX_DIM {
            return Err(GarchError::Dimension(n));
        }
        let bad = |m: &str| Err(GarchError::InvalidParams(m.into()));
        if [&self.a, &self.b, &self.s, &self.z].iter().any(|v| v.len() != n) || self.c.len() != n {
            return bad("vector lengths differ from the dimension");
        }
        for (i, row) in self.c.iter().enumerate() {
            if row.len() != n {
                return bad("C is not square");
            }
            if row[i + 1..].iter().any(|&v| v != 0.0) {
                return bad("C is not lower triangular");
            }
            if row[i] < 0.0 {
                return bad("C has a negative diagonal entry");
            }
        }
        let all = self.alpha.iter().chain(self.c.iter().flatten()).chain(&self.a).chain(&self.b).chain(&self.s).chain(&self.z);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if (0..n).any(|i| self.persistence(i) >= 1.0) {
            return bad("a_i^2 + b_i^2 + s_i^2/2 must be below 1");
        }
        Ok(())
    }

    /// `C'C`.
    pub fn intercept(&self) -> Matrix {
        let n = self.dim();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = (i.max(j)..n).map(|k| self.c[k][i] * self.c[k][j]).sum();
            }
        }
        m
    }

    /// The parameter vectors enter only through outer products, so each is
    /// identified up to sign. Flip each one so its entries sum to a
    /// nonnegative value, and each row of `C` so its diagonal is nonnegative.
    pub fn canonicalize(&mut self) {
        for v in [&mut self.a, &mut self.b, &mut self.s, &mut self.z] {
            if v.iter().sum::<f64>() < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for (i, row) in self.c.iter_mut().enumerate() {
            if row[i] < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    /// Unconditional-level proxy `C'C / (1 - mean_i(a_i^2 + b_i^2))`.
    pub fn unconditional_proxy(&self) -> Matrix {
        let n = self.dim();
        let mean = (0..n).map(|i| self.a[i] * self.a[i] + self.b[i] * self.b[i]).sum::<f64>() / n as f64;
        scale(&self.intercept(), 1.0 / (1.0 - mean))
    }
}

fn scale(m: &Matrix, k: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(i, j)] *= k;
        }
    }
    out
}

/// Negative-shock and large-shock components of an innovation vector.
pub fn asymmetry_indicators(eps: &[f64], h_diag: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xi = eps.iter().map(|&e| if e < 0.0 { e } else { 0.0 }).collect();
    let eta = eps
        .iter()
        .zip(h_diag)
        .map(|(&e, &h)| if e.abs() > math::sqrt(h) { e } else { 0.0 })
        .collect();
    (xi, eta)
}

/// Shock and covariance at `t-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationState {
    pub eps: Vec<f64>,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub h: Matrix,
}

impl InnovationState {
    pub fn new(eps: Vec<f64>, h: Matrix) -> Self {
        let diag: Vec<f64> = (0..h.rows()).map(|i| h[(i, i)]).collect();
        let (xi, eta) = asymmetry_indicators(&eps, &diag);
        Self { eps, xi, eta, h }
    }
}

/// One step of the covariance recursion.
pub fn garch_step(params: &MGarchParams, state: &InnovationState) -> Result<Matrix, GarchError> {
    params.validate()?;
    let n = params.dim();
    if state.eps.len() != n || state.h.rows() != n || state.h.cols() != n {
        return Err(GarchError::InvalidParams("state dimension differs from the parameters".into()));
    }
    let p = Packed::new(params);
    let (mut e, mut xi, mut eta, mut h) = ([0.0; ST], [0.0; ST], [0.0; ST], [0.0; ST * ST]);
    for i in 0..n {
        e[i] = state.eps[i];
        xi[i] = state.xi[i];
        eta[i] = state.eta[i];
        for j in 0..n {
            h[i * ST + j] = state.h[(i, j)];
        }
    }
    let mut out = [0.0; ST * ST];
    p.step(&e, &xi, &eta, &h, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(GarchError::NonFinite { t: 0 });
    }
    Ok(to_matrix(&out, n))
}

fn to_matrix(m: &Mat, n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = m[i * ST + j];
        }
    }
    out
}

fn from_matrix(m: &Matrix) -> Mat {
    let mut out = [0.0; ST * ST];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[i * ST + j] = m[(i, j)];
        }
    }
    out
}

/// Parameters laid out for the inner loop.
#[derive(Debug, Clone)]
pub(crate) struct Packed {
    pub(crate) n: usize,
    alpha: Vect,
    omega: Mat,
    a: Vect,
    b: Vect,
    s: Vect,
    z: Vect,
    bb: Mat,
}

impl Packed {
    pub(crate) fn new(p: &MGarchParams) -> Self {
        let n = p.dim();
        let mut out = Packed {
            n,
            alpha: [0.0; ST],
            omega: from_matrix(&p.intercept()),
            a: [0.0; ST],
            b: [0.0; ST],
            s: [0.0; ST],
            z: [0.0; ST],
            bb: [0.0; ST * ST],
        };
        for i in 0..n {
            out.alpha[i] = p.alpha[i];
            out.a[i] = p.a[i];
            out.b[i] = p.b[i];
            out.s[i] = p.s[i];
            out.z[i] = p.z[i];
        }
        for i in 0..n {
            for j in 0..n {
                out.bb[i * ST + j] = p.b[i] * p.b[j];
            }
        }
        out
    }

    #[inline]
    pub(crate) fn step(&self, e: &Vect, xi: &Vect, eta: &Vect, h_prev: &Mat, out: &mut Mat) {
        let n = self.n;
        let mut ae = [0.0; ST];
        let mut sx = [0.0; ST];
        let mut ze = [0.0; ST];
        for i in 0..n {
            ae[i] = self.a[i] * e[i];
            sx[i] = self.s[i] * xi[i];
            ze[i] = self.z[i] * eta[i];
        }
        for i in 0..n {
            for j in 0..=i {
                let k = i * ST + j;
                let v = self.omega[k] + ae[i] * ae[j] + self.bb[k] * h_prev[k] + sx[i] * sx[j] + ze[i] * ze[j];
                out[k] = v;
                out[j * ST + i] = v;
            }
        }
    }
}

#[inline]
pub(crate) fn indicators(e: &Vect, h: &Mat, n: usize, xi: &mut Vect, eta: &mut Vect) {
    for i in 0..n {
        xi[i] = if e[i] < 0.0 { e[i] } else { 0.0 };
        eta[i] = if e[i] * e[i] > h[i * ST + i] { e[i] } else { 0.0 };
    }
}

/// Lower Cholesky factor of the leading `n x n` block. Returns false unless
/// positive definite.
#[inline]
pub(crate) fn chol(h: &Mat, n: usize, l: &mut Mat) -> bool {
    for j in 0..n {
        let mut d = h[j * ST + j];
        for k in 0..j {
            d -= l[j * ST + k] * l[j * ST + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = math::sqrt(d);
        l[j * ST + j] = d;
        for i in j + 1..n {
            let mut s = h[i * ST + j];
            for k in 0..j {
                s -= l[i * ST + k] * l[j * ST + k];
            }
            l[i * ST + j] = s / d;
        }
    }
    true
}

#[inline]
fn pattern_bits(e: &Vect, h: &Mat, n: usize) -> u8 {
    (0..n).fold(0, |acc, i| acc | u8::from(e[i] * e[i] > h[i * ST + i]) << i | u8::from(e[i] < 0.0) << (4 + i))
}

#[inline]
fn chol_solve(l: &Mat, n: usize, x: &mut Vect) {
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * ST + k] * x[k];
        }
        x[i] = s / l[i * ST + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * ST + i] * x[k];
        }
        x[i] = s / l[i * ST + i];
    }
}

fn chol_inverse(l: &Mat, n: usize, out: &mut Mat) {
    for j in 0..n {
        let mut col = [0.0; ST];
        col[j] = 1.0;
        chol_solve(l, n, &mut col);
        for i in 0..n {
            out[i * ST + j] = col[i];
        }
    }
}

/// Per-date quantities kept for the reverse pass.
#[derive(Default)]
struct Tape {
    h: Vec<Mat>,
    hinv: Vec<Mat>,
    u: Vec<Vect>,
    e: Vec<Vect>,
    xi: Vec<Vect>,
    eta: Vec<Vect>,
    /// Bit `i` of entry `t` is set when `e_i,t^2 > h_ii,t`, bit `4 + i` when
    /// `e_i,t < 0`.
    pattern: Vec<u8>,
}

impl Tape {
    fn clear(&mut self) {
        self.h.clear();
        self.hinv.clear();
        self.u.clear();
        self.e.clear();
        self.xi.clear();
        self.eta.clear();
        self.pattern.clear();
    }
}

const SINGULAR_DET: f64 = 1e-300;

/// Runs the filter and accumulates the log-likelihood. With `mask`, both
/// indicators are taken from it instead of the data.
fn forward(
    p: &Packed,
    data: &Matrix,
    h1: &Mat,
    mask: Option<&[u8]>,
    mut tape: Option<&mut Tape>,
    mut path: Option<&mut FilterPath>,
) -> Result<f64, GarchError> {
    let n = p.n;
    let rows = data.rows();
    let mut h = *h1;
    let mut h_next = [0.0; ST * ST];
    let mut e = [0.0; ST];
    let mut xi = [0.0; ST];
    let mut eta = [0.0; ST];
    let mut l = [0.0; ST * ST];
    let mut ll = 0.0;
    let base = n as f64 * math::LN_2PI;
    if let Some(t) = tape.as_deref_mut() {
        t.clear();
    }
    for t in 0..rows {
        if t > 0 {
            p.step(&e, &xi, &eta, &h, &mut h_next);
            h = h_next;
        }
        let row = data.row(t);
        for i in 0..n {
            e[i] = row[i] - p.alpha[i];
        }
        if !chol(&h, n, &mut l) {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(GarchError::NonFinite { t });
            }
            return Err(GarchError::SingularH { t });
        }
        let mut det = 1.0;
        let mut logdet = 0.0;
        for i in 0..n {
            let d = l[i * ST + i];
            det *= d * d;
            logdet += 2.0 * math::ln(d);
        }
        if det < SINGULAR_DET {
            return Err(GarchError::SingularH { t });
        }
        let mut u = e;
        chol_solve(&l, n, &mut u);
        let quad: f64 = (0..n).map(|i| e[i] * u[i]).sum();
        ll -= 0.5 * (base + logdet + quad);
        if !ll.is_finite() {
            return Err(GarchError::NonFinite { t });
        }
        indicators(&e, &h, n, &mut xi, &mut eta);
        let bits = pattern_bits(&e, &h, n);
        if let Some(m) = mask {
            for i in 0..n {
                xi[i] = if m[t] >> (4 + i) & 1 == 1 { e[i] } else { 0.0 };
                eta[i] = if m[t] >> i & 1 == 1 { e[i] } else { 0.0 };
            }
        }
        if let Some(tp) = tape.as_deref_mut() {
            let mut hinv = [0.0; ST * ST];
            chol_inverse(&l, n, &mut hinv);
            tp.h.push(h);
            tp.hinv.push(hinv);
            tp.u.push(u);
            tp.e.push(e);
            tp.xi.push(xi);
            tp.eta.push(eta);
            tp.pattern.push(bits);
        }
        if let Some(fp) = path.as_deref_mut() {
            fp.h.push(to_matrix(&h, n));
            fp.eps.push(e[..n].to_vec());
        }
    }
    Ok(ll)
}

/// Gradient with respect to the natural parameters.
struct NaturalGradient {
    alpha: Vect,
    c: Mat,
    a: Vect,
    b: Vect,
    s: Vect,
    z: Vect,
}

fn backward(p: &Packed, c: &Mat, tape: &Tape) -> NaturalGradient {
    let n = p.n;
    let rows = tape.h.len();
    let mut g_next = [0.0; ST * ST];
    let mut g_omega = [0.0; ST * ST];
    let (mut ga, mut gb, mut gs, mut gz) = ([0.0; ST], [0.0; ST], [0.0; ST], [0.0; ST]);
    let mut g_alpha = [0.0; ST];
    // dL/de_t flowing back from H_{t+1}.
    let mut ge_carry = [0.0; ST];
    for t in (0..rows).rev() {
        let hinv = &tape.hinv[t];
        let u = &tape.u[t];
        let mut g = [0.0; ST * ST];
        for i in 0..n {
            for j in 0..n {
                let k = i * ST + j;
                g[k] = -0.5 * (hinv[k] - u[i] * u[j]) + p.bb[k] * g_next[k];
            }
        }
        // Direct dependence of l_t on e_t, plus what H_{t+1} sent back.
        for i in 0..n {
            g_alpha[i] += u[i] - ge_carry[i];
        }
        ge_carry = [0.0; ST];
        if t > 0 {
            let e = &tape.e[t - 1];
            let xi = &tape.xi[t - 1];
            let eta = &tape.eta[t - 1];
            let hp = &tape.h[t - 1];
            for i in 0..n {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut ss = 0.0;
                let mut sz = 0.0;
                for j in 0..n {
                    let gk = g[i * ST + j];
                    sa += gk * p.a[j] * e[j];
                    sb += gk * p.b[j] * hp[i * ST + j];
                    ss += gk * p.s[j] * xi[j];
                    sz += gk * p.z[j] * eta[j];
                }
                ga[i] += 2.0 * sa * e[i];
                gb[i] += 2.0 * sb;
                gs[i] += 2.0 * ss * xi[i];
                gz[i] += 2.0 * sz * eta[i];
                let mut de = 2.0 * p.a[i] * sa;
                if xi[i] != 0.0 {
                    de += 2.0 * p.s[i] * ss;
                }
                if eta[i] != 0.0 {
                    de += 2.0 * p.z[i] * sz;
                }
                ge_carry[i] = de;
            }
            for k in 0..ST * ST {
                g_omega[k] += g[k];
            }
        }
        g_next = g;
    }
    // Omega = C'C  =>  dL/dC = 2 C G.
    let mut gc = [0.0; ST * ST];
    for k in 0..n {
        for l in 0..=k {
            let mut acc = 0.0;
            for m in 0..n {
                acc += c[k * ST + m] * g_omega[m * ST + l];
            }
            gc[k * ST + l] = 2.0 * acc;
        }
    }
    NaturalGradient { alpha: g_alpha, c: gc, a: ga, b: gb, s: gs, z: gz }
}

/// Which parameters are free during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub dim: usize,
    /// When false, `s` and `z` are held at zero.
    pub asymmetric: bool,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        let n = self.dim;
        n + n * (n + 1) / 2 + if self.asymmetric { 4 * n } else { 2 * n }
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    fn radial_weights(&self) -> &'static [f64] {
        if self.asymmetric {
            &[1.0, 1.0, 0.5]
        } else {
            &[1.0, 1.0]
        }
    }

    /// Maps admissible parameters to the unconstrained vector. Components at
    /// or beyond the stationarity boundary are pulled just inside it.
    pub fn pack(&self, p: &MGarchParams) -> Vec<f64> {
        let n = self.dim;
        let mut theta = Vec::with_capacity(self.len());
        theta.extend_from_slice(&p.alpha);
        for k in 0..n {
            for l in 0..=k {
                let v = p.c[k][l];
                theta.push(if k == l { math::ln(v.abs().max(1e-12)) } else { v });
            }
        }
        let w = self.radial_weights();
        let mut radial = vec![[0.0; 3]; n];
        for i in 0..n {
            let comps = [p.a[i], p.b[i], p.s[i]];
            let q2: f64 = (0..w.len()).map(|k| w[k] * comps[k] * comps[k]).sum();
            let q = math::sqrt(q2).min(0.999_999);
            let factor = if q > 0.0 { math::atanh(q) / math::sqrt(q2) } else { 1.0 };
            for k in 0..w.len() {
                radial[i][k] = comps[k] * factor;
            }
        }
        for k in 0..w.len() {
            theta.extend(radial.iter().map(|r| r[k]));
        }
        if self.asymmetric {
            theta.extend_from_slice(&p.z);
        }
        theta
    }

    pub fn unpack(&self, theta: &[f64]) -> MGarchParams {
        let n = self.dim;
        let mut it = theta.iter().copied();
        let alpha: Vec<f64> = it.by_ref().take(n).collect();
        let mut c = vec![vec![0.0; n]; n];
        for k in 0..n {
            for l in 0..=k {
                let v = it.next().unwrap_or(0.0);
                c[k][l] = if k == l { math::exp(v) } else { v };
            }
        }
        let w = self.radial_weights();
        let raw: Vec<Vec<f64>> = (0..w.len()).map(|_| it.by_ref().take(n).collect()).collect();
        let (mut a, mut b, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let rho = radial_norm(w, |k| raw[k][i]);
            let g = tanh_over(rho);
            a[i] = raw[0][i] * g;
            b[i] = raw[1][i] * g;
            if self.asymmetric {
                s[i] = raw[2][i] * g;
            }
        }
        let z = if self.asymmetric { it.take(n).collect() } else { vec![0.0; n] };
        MGarchParams { alpha, c, a, b, s, z }
    }

    /// Chain rule from the natural gradient to the unconstrained one.
    fn pull_back(&self, theta: &[f64], p: &MGarchParams, g: &NaturalGradient, out: &mut [f64]) {
        let n = self.dim;
        let mut k = 0;
        for i in 0..n {
            out[k] = g.alpha[i];
            k += 1;
        }
        for r in 0..n {
            for l in 0..=r {
                let gc = g.c[r * ST + l];
                out[k] = if r == l { gc * p.c[r][r] } else { gc };
                k += 1;
            }
        }
        let w = self.radial_weights();
        let m = w.len();
        let base = k;
        for i in 0..n {
            let raw: [f64; 3] = core::array::from_fn(|q| if q < m { theta[base + q * n + i] } else { 0.0 });
            let nat = [g.a[i], g.b[i], g.s[i]];
            let rho = radial_norm(w, |q| raw[q]);
            let gfac = tanh_over(rho);
            let hfac = tanh_over_derivative_by_rho(rho);
            let dot: f64 = (0..m).map(|q| nat[q] * raw[q]).sum();
            for q in 0..m {
                out[base + q * n + i] = gfac * nat[q] + hfac * w[q] * raw[q] * dot;
            }
        }
        k = base + m * n;
        if self.asymmetric {
            for i in 0..n {
                out[k + i] = g.z[i];
            }
        }
    }
}

fn radial_norm(w: &[f64], raw: impl Fn(usize) -> f64) -> f64 {
    math::sqrt((0..w.len()).map(|k| w[k] * raw(k) * raw(k)).sum())
}

/// `tanh(r) / r`, equal to 1 at 0.
fn tanh_over(r: f64) -> f64 {
    if r < 1e-4 {
        1.0 - r * r / 3.0
    } else {
        math::tanh(r) / r
    }
}

/// `d/dr (tanh(r)/r) / r`.
fn tanh_over_derivative_by_rho(r: f64) -> f64 {
    if r < 1e-3 {
        -2.0 / 3.0 + 0.8 * r * r
    } else {
        let t = math::tanh(r);
        let sech2 = 1.0 - t * t;
        (r * sech2 - t) / (r * r * r)
    }
}

/// Sample covariance (divide by T) of the columns of `data`.
pub fn sample_covariance(data: &Matrix) -> (Vec<f64>, Matrix) {
    let (rows, n) = (data.rows(), data.cols());
    let mut mean = vec![0.0; n];
    for t in 0..rows {
        for i in 0..n {
            mean[i] += data[(t, i)];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = Matrix::zeros(n, n);
    for t in 0..rows {
        for i in 0..n {
            for j in 0..=i {
                cov[(i, j)] += (data[(t, i)] - mean[i]) * (data[(t, j)] - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let v = cov[(i, j)] / rows as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Starting covariance for the filter: the sample covariance of the data,
/// floored to be positive definite.
pub fn initial_covariance(data: &Matrix) -> Matrix {
    let (_, cov) = sample_covariance(data);
    let floor = 1e-8 * cov.trace().max(1e-300) / cov.rows() as f64;
    if cov.cholesky().is_ok() && cov.min_eigenvalue() > floor {
        cov
    } else {
        clip_eigenvalues(&cov, floor)
    }
}

/// Gaussian quasi log-likelihood with the filter started at the sample
/// covariance.
pub fn qml_loglik(params: &MGarchParams, data: &Matrix) -> Result<f64, GarchError> {
    qml_loglik_from(params, data, &initial_covariance(data))
}

/// Gaussian quasi log-likelihood with an explicit `H_1`.
pub fn qml_loglik_from(params: &MGarchParams, data: &Matrix, h1: &Matrix) -> Result<f64, GarchError> {
    params.validate()?;
    check_shape(params.dim(), data, h1)?;
    forward(&Packed::new(params), data, &from_matrix(h1), None, None, None)
}

fn check_shape(n: usize, data: &Matrix, h1: &Matrix) -> Result<(), GarchError> {
    if data.cols() != n || h1.rows() != n || h1.cols() != n {
        return Err(GarchError::InvalidParams("data or H_1 dimension differs from the parameters".into()));
    }
    if data.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(GarchError::NonFinite { t: 0 });
    }
    Ok(())
}

/// Filtered covariances and innovations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterPath {
    pub h: Vec<Matrix>,
    pub eps: Vec<Vec<f64>>,
    pub loglik: f64,
}

pub fn filter(params: &MGarchParams, data: &Matrix, h1: &Matrix) -> Result<FilterPath, GarchError> {
    params.validate()?;
    check_shape(params.dim(), data, h1)?;
    let mut path = FilterPath::default();
    let ll = forward(&Packed::new(params), data, &from_matrix(h1), None, None, Some(&mut path))?;
    path.loglik = ll;
    Ok(path)
}

/// The quasi log-likelihood as a function of the unconstrained parameters.
pub struct QmlObjective<'a> {
    data: &'a Matrix,
    h1: Mat,
    layout: ParamLayout,
}

impl<'a> QmlObjective<'a> {
    pub fn new(data: &'a Matrix, layout: ParamLayout) -> Result<Self, GarchError> {
        Self::with_initial(data, layout, &initial_covariance(data))
    }

    pub fn with_initial(data: &'a Matrix, layout: ParamLayout, h1: &Matrix) -> Result<Self, GarchError> {
        if layout.dim == 0 || layout.dim > MAX_DIM {
            return Err(GarchError::Dimension(layout.dim));
        }
        check_shape(layout.dim, data, h1)?;
        Ok(Self { data, h1: from_matrix(h1), layout })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn loglik(&self, theta: &[f64]) -> Result<f64, GarchError> {
        let p = self.layout.unpack(theta);
        forward(&Packed::new(&p), self.data, &self.h1, None, None, None)
    }

    /// Log-likelihood and its exact gradient in the unconstrained space.
    pub fn loglik_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64, GarchError> {
        let mut tape = Tape::default();
        self.eval(theta, grad, None, &mut tape)
    }

    /// Indicator pattern at `theta`, one byte per date: bit `i` for a large
    /// shock in component `i`, bit `4 + i` for a negative one.
    pub fn indicator_pattern(&self, theta: &[f64]) -> Result<Vec<u8>, GarchError> {
        let mut tape = Tape::default();
        let mut grad = vec![0.0; theta.len()];
        self.eval(theta, &mut grad, None, &mut tape)?;
        Ok(tape.pattern)
    }

    /// Log-likelihood and gradient with the indicators held at `mask`. This
    /// is smooth in `theta` and agrees with the unmasked
    /// objective wherever the data-implied pattern equals `mask`.
    pub fn masked_loglik_and_gradient(&self, theta: &[f64], mask: &[u8], grad: &mut [f64]) -> Result<f64, GarchError> {
        let mut tape = Tape::default();
        self.eval(theta, grad, Some(mask), &mut tape)
    }

    fn eval(&self, theta: &[f64], grad: &mut [f64], mask: Option<&[u8]>, tape: &mut Tape) -> Result<f64, GarchError> {
        let p = self.layout.unpack(theta);
        let packed = Packed::new(&p);
        let ll = forward(&packed, self.data, &self.h1, mask, Some(tape), None)?;
        let mut c = [0.0; ST * ST];
        for i in 0..p.dim() {
            for j in 0..p.dim() {
                c[i * ST + j] = p.c[i][j];
            }
        }
        let ng = backward(&packed, &c, tape);
        self.layout.pull_back(theta, &p, &ng, grad);
        Ok(ll)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchOptions {
    pub max_iter: usize,
    /// Jittered restarts in addition to the default start.
    pub restarts: usize,
    /// Gradient infinity-norm tolerance in the unconstrained space.
    pub gtol: f64,
    pub seed: u64,
}

impl Default for GarchOptions {
    fn default() -> Self {
        Self { max_iter: 2000, restarts: 5, gtol: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MGarchFit {
    pub params: MGarchParams,
    pub loglik: f64,
    #[serde(skip)]
    pub h_path: Vec<Matrix>,
    #[serde(skip)]
    pub eps_path: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Infinity-norm of the log-likelihood gradient in the unconstrained
    /// space at the reported optimum.
    pub gradient_norm: f64,
    pub n_obs: usize,
}

impl MGarchFit {
    pub fn require_converged(&self) -> Result<&Self, GarchError> {
        if self.converged {
            Ok(self)
        } else {
            Err(GarchError::NoConvergence)
        }
    }
}

fn check_data(data: &Matrix) -> Result<(), GarchError> {
    if data.rows() < MIN_SERIES_LEN {
        return Err(GarchError::TooShort { n: data.rows(), min: MIN_SERIES_LEN });
    }
    if data.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(GarchError::NonFinite { t: 0 });
    }
    for j in 0..data.cols() {
        let first = data[(0, j)];
        if (0..data.rows()).all(|t| data[(t, j)] == first) {
            return Err(GarchError::DegenerateData { column: j });
        }
    }
    Ok(())
}

/// Variance-targeted starting point: `a = 0.3`, `b = 0.85`, `s = z = 0.1`
/// (`s = z = 0` for the symmetric layout) and `C'C` matched to the sample
/// covariance given those loadings.
pub fn starting_params(data: &Matrix, layout: ParamLayout) -> MGarchParams {
    let n = layout.dim;
    let (mean, cov) = sample_covariance(data);
    let (a, b) = (0.3, 0.85);
    let (s, z) = if layout.asymmetric { (0.1, 0.1) } else { (0.0, 0.0) };
    let k = 1.0 - a * a - b * b - 0.5 * s * s;
    let target = scale(&cov, k);
    let floor = 1e-6 * target.trace().max(1e-300) / n as f64;
    let target = clip_eigenvalues(&target, floor);
    MGarchParams {
        alpha: mean,
        c: upper_lower_factor(&target),
        a: vec![a; n],
        b: vec![b; n],
        s: vec![s; n],
        z: vec![z; n],
    }
}

/// Lower-triangular `C` with `C'C = m` and a positive diagonal.
pub fn upper_lower_factor(m: &Matrix) -> Vec<Vec<f64>> {
    let n = m.rows();
    let mut rev = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            rev[(i, j)] = m[(n - 1 - i, n - 1 - j)];
        }
    }
    let l = rev.cholesky().expect("target is positive definite after clipping");
    (0..n).map(|i| (0..n).map(|j| if j <= i { l[(n - 1 - j, n - 1 - i)] } else { 0.0 }).collect()).collect()
}

/// Quasi-maximum-likelihood fit of the asymmetric system. Columns must be
/// ordered (country, fx_dev, fx_emg, world) for the covariance extraction to
/// make sense, although the estimator itself is order-agnostic.
pub fn estimate_mgarch(data: &Matrix, opts: &GarchOptions) -> Result<MGarchFit, GarchError> {
    estimate_with_layout(data, ParamLayout { dim: data.cols(), asymmetric: true }, opts)
}

struct StartResult {
    theta: Vec<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
}

// The indicators make the likelihood piecewise smooth. Each round
// freezes them at the pattern implied by the current point and runs BFGS on
// that smooth piece; a point is accepted once its own pattern matches the one
// it was optimised under, so the reported gradient is the true gradient.
fn run_start(objective: &QmlObjective<'_>, start: &[f64], opts: &GarchOptions) -> Option<StartResult> {
    let mut theta = start.to_vec();
    let mut pattern = objective.indicator_pattern(&theta).ok()?;
    let mut seen: Vec<u64> = Vec::new();
    let mut used = 0usize;
    let mut converged = false;
    while used < opts.max_iter {
        seen.push(fnv1a(&pattern));
        let mask = &pattern;
        let f = |x: &[f64], g: &mut [f64]| -> f64 {
            match objective.masked_loglik_and_gradient(x, mask, g) {
                Ok(ll) => {
                    g.iter_mut().for_each(|v| *v = -*v);
                    -ll
                }
                Err(_) => f64::INFINITY,
            }
        };
        let m = bfgs(f, &theta, &BfgsOptions { max_iter: opts.max_iter - used, gtol: opts.gtol });
        used += m.iterations.max(1);
        if !m.value.is_finite() {
            break;
        }
        let piece_converged = m.converged();
        theta = m.x;
        let next = objective.indicator_pattern(&theta).ok()?;
        if next == pattern {
            converged = piece_converged;
            break;
        }
        if seen.contains(&fnv1a(&next)) {
            // Two pieces whose optima lie in each other's region. Try the
            // pieces where the disputed indicators agree before giving up.
            let union: Vec<u8> = pattern.iter().zip(&next).map(|(a, b)| a | b).collect();
            let common: Vec<u8> = pattern.iter().zip(&next).map(|(a, b)| a & b).collect();
            match [union, common].into_iter().find(|c| !seen.contains(&fnv1a(c))) {
                Some(c) => pattern = c,
                None => break,
            }
            continue;
        }
        pattern = next;
    }
    let mut grad = vec![0.0; theta.len()];
    let loglik = objective.loglik_and_gradient(&theta, &mut grad).ok()?;
    let gradient_norm = inf_norm(&grad);
    if !loglik.is_finite() {
        return None;
    }
    Some(StartResult { theta, loglik, converged: converged && gradient_norm < opts.gtol, iterations: used, gradient_norm })
}

fn jitter(theta: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    theta
        .iter()
        .map(|&v| {
            let u: f64 = StandardNormal.sample(rng);
            v + scale * (v.abs() + 0.1) * u
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn estimate_with_layout(data: &Matrix, layout: ParamLayout, opts: &GarchOptions) -> Result<MGarchFit, GarchError> {
    if layout.dim == 0 || layout.dim > MAX_DIM || data.cols() != layout.dim {
        return Err(GarchError::Dimension(data.cols()));
    }
    check_data(data)?;
    let h1 = initial_covariance(data);
    let objective = QmlObjective::with_initial(data, layout, &h1)?;
    let theta0 = layout.pack(&starting_params(data, layout));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![theta0.clone()];
    starts.extend((0..opts.restarts).map(|_| jitter(&theta0, 0.1, &mut rng)));
    let results: Vec<StartResult> = starts.iter().filter_map(|s| run_start(&objective, s, opts)).collect();

    // A maximum on an indicator switch has no zero gradient; prefer a
    // stationary point when any start reached one.
    let best = results
        .iter()
        .filter(|r| r.converged)
        .max_by(|x, y| x.loglik.total_cmp(&y.loglik))
        .or_else(|| results.iter().max_by(|x, y| x.loglik.total_cmp(&y.loglik)));
    let best = best.ok_or(GarchError::SingularH { t: 0 })?;
    let mut params = layout.unpack(&best.theta);
    let path = filter(&params, data, &h1)?;
    params.canonicalize();
    Ok(MGarchFit {
        params,
        loglik: path.loglik,
        h_path: path.h,
        eps_path: path.eps,
        converged: best.converged,
        iterations: best.iterations,
        gradient_norm: best.gradient_norm,
        n_obs: data.rows(),
    })
}

/// Conditional (co)variances of a country return, by month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovRow {
    pub h_ii: f64,
    pub h_im: f64,
    pub h_id: f64,
    pub h_ie: f64,
}

impl CovRow {
    pub fn from_h(h: &Matrix) -> Self {
        Self {
            h_ii: h[(COUNTRY, COUNTRY)],
            h_im: h[(COUNTRY, WORLD)],
            h_id: h[(COUNTRY, FX_DEV)],
            h_ie: h[(COUNTRY, FX_EMG)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryCovariances {
    pub start: MonthIndex,
    pub rows: Vec<CovRow>,
}

impl CountryCovariances {
    pub fn window(&self, from: MonthIndex, len: usize) -> Option<&[CovRow]> {
        let k = self.start.months_until(from);
        if k < 0 || k as usize + len > self.rows.len() {
            return None;
        }
        Some(&self.rows[k as usize..k as usize + len])
    }
}

/// Step-two regressors for every country.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariancePanel {
    pub countries: BTreeMap<String, CountryCovariances>,
}

impl CovariancePanel {
    pub fn get(&self, country: &str) -> Option<&CountryCovariances> {
        self.countries.get(country)
    }
}

/// Pulls `(h_ii, h_im, h_id, h_ie)` out of each fitted covariance path.
pub fn extract_covariances<'a, I>(fits: I) -> CovariancePanel
where
    I: IntoIterator<Item = (&'a str, MonthIndex, &'a MGarchFit)>,
{
    let mut out = CovariancePanel::default();
    for (id, start, fit) in fits {
        let rows = fit.h_path.iter().map(CovRow::from_h).collect();
        out.countries.insert(id.into(), CountryCovariances { start, rows });
    }
    out
}

/// Fitted univariate GARCH(1,1) variance path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateVol {
    pub mean: f64,
    pub omega: f64,
    pub a: f64,
    pub b: f64,
    pub variance: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
}

impl UnivariateVol {
    /// `c^2 / (1 - a^2 - b^2)`.
    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.a * self.a - self.b * self.b)
    }
}

/// Symmetric GARCH(1,1) on one series, used to build exchange-rate
/// volatility factors.
pub fn univariate_garch_vol(series: &[f64], opts: &GarchOptions) -> Result<UnivariateVol, GarchError> {
    let data = Matrix::from_row_major(series.len(), 1, series.to_vec());
    let fit = estimate_with_layout(&data, ParamLayout { dim: 1, asymmetric: false }, opts)?;
    let c = fit.params.c[0][0];
    Ok(UnivariateVol {
        mean: fit.params.alpha[0],
        omega: c * c,
        a: fit.params.a[0],
        b: fit.params.b[0],
        variance: fit.h_path.iter().map(|h| h[(0, 0)]).collect(),
        loglik: fit.loglik,
        converged: fit.converged,
    })
}
