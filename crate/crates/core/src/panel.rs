//! Step two: the partially segmented pricing equation
//!
//! ```text
//! R_it - Rf_t = psi_{i,t-1} (d_m h_im + d_d h_id + d_e h_ie) + (1 - psi_{i,t-1}) d_dom h_ii + e_it
//! psi_{i,t-1} = logistic(kappa z_{i,t-1})
//! ```
//!
//! fitted by panel nonlinear least squares, with Newey-West standard errors
//! computed country by country.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FactorPanel, Group, MonthIndex, ReturnPanel, Series};
use crate::garch::{CovRow, CovariancePanel};
use crate::linalg::{cholesky_in_place, cholesky_solve, symmetrize, Matrix};
use crate::math;
use crate::optim::{inf_norm, levenberg_marquardt, normal_equations, LmOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PanelError {
    #[error("no {0} countries in the panel")]
    EmptyGroup(GroupFilter),
    #[error("alignment: {0}")]
    Alignment(#[from] DataError),
    #[error("covariances for {country} do not cover {start} + {len} months")]
    CovarianceCoverage { country: String, start: MonthIndex, len: usize },
    #[error("unknown country {0}")]
    UnknownCountry(String),
    #[error("Jacobian is rank deficient")]
    SingularJacobian,
    #[error("constant integration weight {0} is outside [0, 1]")]
    InvalidPsi(f64),
    #[error("non-finite value in the step-two inputs for {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectsMode {
    Pooled,
    IndividualEffects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupFilter {
    All,
    Developed,
    Emerging,
}

impl GroupFilter {
    pub fn admits(self, g: Group) -> bool {
        match self {
            GroupFilter::All => true,
            GroupFilter::Developed => g == Group::Developed,
            GroupFilter::Emerging => g == Group::Emerging,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupFilter::All => "all",
            GroupFilter::Developed => "developed",
            GroupFilter::Emerging => "emerging",
        }
    }
}

impl core::fmt::Display for GroupFilter {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Domestic risk price: one for the panel, or one per country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domestic {
    Pooled(f64),
    PerCountry(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelParams {
    pub kappa: f64,
    pub delta_m: f64,
    pub delta_d_fx: f64,
    pub delta_e_fx: f64,
    pub domestic: Domestic,
}

impl PanelParams {
    pub fn domestic_for(&self, country: &str) -> Result<f64, PanelError> {
        match &self.domestic {
            Domestic::Pooled(d) => Ok(*d),
            Domestic::PerCountry(m) => m.get(country).copied().ok_or_else(|| PanelError::UnknownCountry(country.into())),
        }
    }
}

/// Largest double below one.
const PSI_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `exp(kz) / (1 + exp(kz))`, kept strictly inside (0, 1).
pub fn logistic_psi(kappa: f64, z: f64) -> f64 {
    let x = kappa * z;
    let p = if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, PSI_MAX)
}

/// Expected excess return implied by the pricing equation.
pub fn model_prediction(params: &PanelParams, cov: &CovRow, psi: f64, country: &str) -> Result<f64, PanelError> {
    let dom = params.domestic_for(country)?;
    Ok(predict(params.delta_m, params.delta_d_fx, params.delta_e_fx, dom, cov, psi))
}

#[inline]
fn predict(dm: f64, dd: f64, de: f64, dom: f64, cov: &CovRow, psi: f64) -> f64 {
    psi * (dm * cov.h_im + dd * cov.h_id + de * cov.h_ie) + (1.0 - psi) * dom * cov.h_ii
}

/// How the integration weight is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsiSpec {
    #[default]
    Logistic,
    /// Fixed weight for every observation; `kappa` is not estimated. At 1 the
    /// domestic price drops out, at 0 the global prices do.
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelOptions {
    pub mode: EffectsMode,
    pub group: GroupFilter,
    /// Newey-West truncation lag; `None` picks `floor(4 (T/100)^(2/9))`.
    pub nw_lag: Option<usize>,
    pub psi: PsiSpec,
    pub lm: LmOptions,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self { mode: EffectsMode::Pooled, group: GroupFilter::All, nw_lag: None, psi: PsiSpec::Logistic, lm: LmOptions::default() }
    }
}

/// One stacked observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub country: usize,
    pub y: f64,
    pub cov: CovRow,
    /// Factor value of the previous month.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySpan {
    pub id: String,
    pub start: MonthIndex,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub tstat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelFit {
    pub params: PanelParams,
    pub coefficients: Vec<Coefficient>,
    /// Sandwich covariance of the estimated coefficients, in the order of
    /// `coefficients` entries that carry a standard error.
    pub covariance: Matrix,
    pub ssr: f64,
    pub n_obs: usize,
    pub n_countries: usize,
    pub countries: Vec<CountrySpan>,
    pub mode: EffectsMode,
    pub group: GroupFilter,
    pub nw_lag: usize,
    pub psi: PsiSpec,
    pub converged: bool,
    pub identified: bool,
    pub gradient_norm: f64,
    pub factor_sd: f64,
    pub warnings: Vec<String>,
}

impl PanelFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    /// Two-sided normal confidence interval for a coefficient.
    pub fn confidence_interval(&self, name: &str, z: f64) -> Option<(f64, f64)> {
        let c = self.coefficient(name)?;
        let se = c.se?;
        Some((c.estimate - z * se, c.estimate + z * se))
    }
}

/// Significance marks with the ranking used in the published tables: one
/// star at 1%, two at 5%, three at 10% (two-sided normal).
pub fn stars(tstat: f64) -> &'static str {
    let t = tstat.abs();
    if t > 2.575_829_303_548_901 {
        "*"
    } else if t > 1.959_963_984_540_054 {
        "**"
    } else if t > 1.644_853_626_951_472_2 {
        "***"
    } else {
        ""
    }
}

/// `floor(4 (T/100)^(2/9))`.
pub fn default_nw_lag(mean_len: f64) -> usize {
    math::floor(4.0 * math::pow(mean_len / 100.0, 2.0 / 9.0)) as usize
}

/// Bartlett-weighted long-run covariance of the score rows, with lag products
/// taken inside each block only. `block_lens` partitions the rows in order.
pub fn newey_west(scores: &Matrix, block_lens: &[usize], lag: usize) -> Matrix {
    let p = scores.cols();
    assert_eq!(block_lens.iter().sum::<usize>(), scores.rows(), "blocks must partition the rows");
    let mut omega = Matrix::zeros(p, p);
    let mut offset = 0;
    for &len in block_lens {
        for l in 0..=lag.min(len.saturating_sub(1)) {
            let w = if l == 0 { 1.0 } else { 1.0 - l as f64 / (lag as f64 + 1.0) };
            for t in offset + l..offset + len {
                let gt = scores.row(t);
                let gs = scores.row(t - l);
                for i in 0..p {
                    for j in 0..p {
                        let v = gt[i] * gs[j];
                        if l == 0 {
                            omega[(i, j)] += v;
                        } else {
                            omega[(i, j)] += w * v;
                            omega[(j, i)] += w * v;
                        }
                    }
                }
            }
        }
        offset += len;
    }
    symmetrize(&mut omega);
    omega
}

/// `(J'J)^{-1} Omega (J'J)^{-1}` with `Omega` from [`newey_west`] applied to
/// the rows `J_k * resid_k`.
pub fn hac_covariance(jac: &Matrix, resid: &[f64], block_lens: &[usize], lag: usize) -> Result<Matrix, PanelError> {
    let (m, p) = (jac.rows(), jac.cols());
    let mut scores = Matrix::zeros(m, p);
    for k in 0..m {
        for j in 0..p {
            scores[(k, j)] = jac[(k, j)] * resid[k];
        }
    }
    let omega = newey_west(&scores, block_lens, lag);
    let bread = jac.transpose().matmul(jac).spd_inverse().map_err(|_| PanelError::SingularJacobian)?;
    let mut v = bread.matmul(&omega).matmul(&bread);
    symmetrize(&mut v);
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Kappa,
    DeltaM,
    DeltaD,
    DeltaE,
    Dom(usize),
}

const KAPPA: usize = 0;
const FIXED: usize = 4;

impl Param {
    fn slot(self) -> usize {
        match self {
            Param::Kappa => KAPPA,
            Param::DeltaM => 1,
            Param::DeltaD => 2,
            Param::DeltaE => 3,
            Param::Dom(i) => FIXED + i,
        }
    }
}

/// Stacked step-two data, ordered by country then month.
#[derive(Debug, Clone)]
pub struct PanelProblem {
    obs: Vec<Observation>,
    countries: Vec<CountrySpan>,
    mode: EffectsMode,
    group: GroupFilter,
}

impl PanelProblem {
    pub fn build(
        covs: &CovariancePanel,
        returns: &ReturnPanel,
        factor: &FactorPanel,
        mode: EffectsMode,
        group: GroupFilter,
    ) -> Result<Self, PanelError> {
        let mut obs = Vec::new();
        let mut countries = Vec::new();
        for c in returns.countries().iter().filter(|c| group.admits(c.group)) {
            let start = c.start();
            let coverage = || PanelError::CovarianceCoverage { country: c.id.clone(), start, len: c.len() };
            let rows = covs.get(&c.id).ok_or_else(coverage)?.window(start, c.len()).ok_or_else(coverage)?;
            let z = factor.lagged(c)?;
            let idx = countries.len();
            for k in 0..c.len() {
                let o = Observation { country: idx, y: c.series.values[k], cov: rows[k], z: z[k] };
                let vals = [o.y, o.z, o.cov.h_ii, o.cov.h_im, o.cov.h_id, o.cov.h_ie];
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(PanelError::NonFinite(c.id.clone()));
                }
                obs.push(o);
            }
            countries.push(CountrySpan { id: c.id.clone(), start, len: c.len() });
        }
        if countries.is_empty() {
            return Err(PanelError::EmptyGroup(group));
        }
        Ok(Self { obs, countries, mode, group })
    }

    /// Builds a problem from observations already stacked by country.
    pub fn from_observations(obs: Vec<Observation>, countries: Vec<CountrySpan>, mode: EffectsMode) -> Self {
        assert_eq!(countries.iter().map(|c| c.len).sum::<usize>(), obs.len());
        Self { obs, countries, mode, group: GroupFilter::All }
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    fn n_dom(&self) -> usize {
        match self.mode {
            EffectsMode::Pooled => 1,
            EffectsMode::IndividualEffects => self.countries.len(),
        }
    }

    /// Length of the full parameter vector `(kappa, d_m, d_d, d_e, domestic...)`.
    pub fn n_params(&self) -> usize {
        FIXED + self.n_dom()
    }

    fn dom_index(&self, o: &Observation) -> usize {
        match self.mode {
            EffectsMode::Pooled => 0,
            EffectsMode::IndividualEffects => o.country,
        }
    }

    fn psi(&self, spec: PsiSpec, kappa: f64, z: f64) -> f64 {
        match spec {
            PsiSpec::Logistic => logistic_psi(kappa, z),
            PsiSpec::Constant(c) => c,
        }
    }

    /// Sum of squared residuals at the full parameter vector.
    pub fn ssr(&self, theta: &[f64]) -> f64 {
        self.obs
            .iter()
            .map(|o| {
                let psi = logistic_psi(theta[KAPPA], o.z);
                let r = o.y - predict(theta[1], theta[2], theta[3], theta[FIXED + self.dom_index(o)], &o.cov, psi);
                r * r
            })
            .sum()
    }

    /// SSR and its gradient in the full parameter vector.
    pub fn ssr_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let all = self.all_params(true, true, true);
        let mut grad = vec![0.0; self.n_params()];
        let mut row = vec![0.0; all.len()];
        let mut ssr = 0.0;
        for o in &self.obs {
            let r = self.row(PsiSpec::Logistic, theta, &all, o, &mut row);
            ssr += r * r;
            for (k, p) in all.iter().enumerate() {
                grad[p.slot()] += 2.0 * r * row[k];
            }
        }
        (ssr, grad)
    }

    fn all_params(&self, kappa: bool, global: bool, dom: bool) -> Vec<Param> {
        let mut v = Vec::new();
        if kappa {
            v.push(Param::Kappa);
        }
        if global {
            v.extend([Param::DeltaM, Param::DeltaD, Param::DeltaE]);
        }
        if dom {
            v.extend((0..self.n_dom()).map(Param::Dom));
        }
        v
    }

    /// Residual `prediction - y` and its derivatives in the active parameters.
    #[inline]
    fn row(&self, spec: PsiSpec, theta: &[f64], active: &[Param], o: &Observation, out: &mut [f64]) -> f64 {
        let psi = self.psi(spec, theta[KAPPA], o.z);
        let d = self.dom_index(o);
        let global = theta[1] * o.cov.h_im + theta[2] * o.cov.h_id + theta[3] * o.cov.h_ie;
        let local = theta[FIXED + d] * o.cov.h_ii;
        for (k, p) in active.iter().enumerate() {
            out[k] = match *p {
                Param::Kappa => psi * (1.0 - psi) * o.z * (global - local),
                Param::DeltaM => psi * o.cov.h_im,
                Param::DeltaD => psi * o.cov.h_id,
                Param::DeltaE => psi * o.cov.h_ie,
                Param::Dom(i) if i == d => (1.0 - psi) * o.cov.h_ii,
                Param::Dom(_) => 0.0,
            };
        }
        psi * global + (1.0 - psi) * local - o.y
    }

    fn residuals_and_jacobian(&self, spec: PsiSpec, theta: &[f64], active: &[Param], r: &mut [f64], jac: &mut [f64]) {
        let n = active.len();
        for (k, o) in self.obs.iter().enumerate() {
            r[k] = self.row(spec, theta, active, o, &mut jac[k * n..(k + 1) * n]);
        }
    }

    /// Least squares in the prices with `kappa` held fixed.
    fn linear_prices(&self, spec: PsiSpec, theta: &mut [f64], active: &[Param]) -> Option<f64> {
        let (m, n) = (self.obs.len(), active.len());
        let mut base = theta.to_vec();
        for p in active {
            base[p.slot()] = 0.0;
        }
        let mut r = vec![0.0; m];
        let mut jac = vec![0.0; m * n];
        self.residuals_and_jacobian(spec, &base, active, &mut r, &mut jac);
        let mut jtj = vec![0.0; n * n];
        let mut grad = vec![0.0; n];
        normal_equations(&jac, &r, m, n, &mut jtj, &mut grad);
        cholesky_in_place(&mut jtj, n).ok()?;
        let mut x: Vec<f64> = grad.iter().map(|g| -0.5 * g).collect();
        cholesky_solve(&jtj, n, &mut x);
        for (p, v) in active.iter().zip(&x) {
            theta[p.slot()] = *v;
        }
        Some(self.ssr_with(spec, theta))
    }

    fn ssr_with(&self, spec: PsiSpec, theta: &[f64]) -> f64 {
        self.obs
            .iter()
            .map(|o| {
                let psi = self.psi(spec, theta[KAPPA], o.z);
                let r = o.y - predict(theta[1], theta[2], theta[3], theta[FIXED + self.dom_index(o)], &o.cov, psi);
                r * r
            })
            .sum()
    }

    fn solve(&self, spec: PsiSpec, start: &[f64], active: &[Param], lm: &LmOptions) -> Solution {
        let m = self.obs.len();
        let mut theta = start.to_vec();
        let x0: Vec<f64> = active.iter().map(|p| theta[p.slot()]).collect();
        let scratch = start.to_vec();
        let res = levenberg_marquardt(
            |x, r, jac| {
                let mut t = scratch.clone();
                for (p, v) in active.iter().zip(x) {
                    t[p.slot()] = *v;
                }
                self.residuals_and_jacobian(spec, &t, active, r, jac);
                r.iter().all(|v| v.is_finite())
            },
            &x0,
            m,
            lm,
        );
        for (p, v) in active.iter().zip(&res.x) {
            theta[p.slot()] = *v;
        }
        let mut sol = Solution { theta, ssr: res.ssr, gradient: res.gradient, converged: res.converged };
        self.polish(spec, active, lm, &mut sol);
        sol
    }

    /// Undamped Gauss-Newton steps from the LM optimum, kept while they lower
    /// the SSR. On a linear problem the first one lands on the exact solution.
    fn polish(&self, spec: PsiSpec, active: &[Param], lm: &LmOptions, sol: &mut Solution) {
        let (m, n) = (self.obs.len(), active.len());
        let mut r = vec![0.0; m];
        let mut jac = vec![0.0; m * n];
        let mut jtj = vec![0.0; n * n];
        let mut grad = vec![0.0; n];
        for _ in 0..3 {
            self.residuals_and_jacobian(spec, &sol.theta, active, &mut r, &mut jac);
            normal_equations(&jac, &r, m, n, &mut jtj, &mut grad);
            if cholesky_in_place(&mut jtj, n).is_err() {
                return;
            }
            let mut step: Vec<f64> = grad.iter().map(|g| -0.5 * g).collect();
            cholesky_solve(&jtj, n, &mut step);
            let mut trial = sol.theta.clone();
            for (p, d) in active.iter().zip(&step) {
                trial[p.slot()] += d;
            }
            let ssr = self.ssr_with(spec, &trial);
            if !(ssr < sol.ssr) {
                break;
            }
            sol.theta = trial;
            sol.ssr = ssr;
        }
        self.residuals_and_jacobian(spec, &sol.theta, active, &mut r, &mut jac);
        normal_equations(&jac, &r, m, n, &mut jtj, &mut grad);
        sol.gradient = grad;
        sol.converged = sol.converged || inf_norm(&sol.gradient) < lm.gtol_rel * (1.0 + sol.ssr);
    }

    fn factor_sd(&self) -> f64 {
        let n = self.obs.len() as f64;
        let mean = self.obs.iter().map(|o| o.z).sum::<f64>() / n;
        math::sqrt(self.obs.iter().map(|o| (o.z - mean) * (o.z - mean)).sum::<f64>() / n)
    }

    /// Full estimation with multistart, identification checks and HAC
    /// inference.
    pub fn fit(&self, opts: &PanelOptions) -> Result<PanelFit, PanelError> {
        if let PsiSpec::Constant(c) = opts.psi {
            if !(0.0..=1.0).contains(&c) {
                return Err(PanelError::InvalidPsi(c));
            }
        }
        let mut warnings = Vec::new();
        let sd = self.factor_sd();
        let mut theta = vec![0.0; self.n_params()];
        let mut identified = true;

        let active = match opts.psi {
            PsiSpec::Constant(c) => self.all_params(false, c > 0.0, c < 1.0),
            PsiSpec::Logistic => self.all_params(true, true, true),
        };
        let prices: Vec<Param> = active.iter().copied().filter(|p| *p != Param::Kappa).collect();

        let best = match opts.psi {
            PsiSpec::Constant(_) => {
                self.linear_prices(opts.psi, &mut theta, &prices).ok_or(PanelError::SingularJacobian)?;
                self.solve(opts.psi, &theta, &prices, &opts.lm)
            }
            PsiSpec::Logistic => {
                let grid: Vec<f64> = if sd > 1e-12 { [-1.0, -0.1, 0.0, 0.1, 1.0].iter().map(|k| k / sd).collect() } else { vec![0.0] };
                let mut starts = Vec::new();
                for &k in &grid {
                    let mut t = vec![0.0; self.n_params()];
                    t[KAPPA] = k;
                    let ssr = self.linear_prices(opts.psi, &mut t, &prices).ok_or(PanelError::SingularJacobian)?;
                    starts.push((t, ssr));
                }
                let lo = starts.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                let hi = starts.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                if sd <= 1e-12 || (hi - lo) <= 1e-10 * lo.max(f64::MIN_POSITIVE) {
                    identified = false;
                    warnings.push(format!("kappa is not identified: factor sd {sd:.3e}, profile SSR range {:.3e}", hi - lo));
                    let mut t = vec![0.0; self.n_params()];
                    self.linear_prices(opts.psi, &mut t, &prices).ok_or(PanelError::SingularJacobian)?;
                    self.solve(opts.psi, &t, &prices, &opts.lm)
                } else {
                    if self.mode == EffectsMode::IndividualEffects {
                        starts.push((self.pooled_start(opts)?, 0.0));
                    }
                    let mut best: Option<Solution> = None;
                    for (t, _) in &starts {
                        let sol = self.solve(opts.psi, t, &active, &opts.lm);
                        if sol.ssr.is_finite() && best.as_ref().map_or(true, |b| sol.ssr < b.ssr) {
                            best = Some(sol);
                        }
                    }
                    best.ok_or(PanelError::SingularJacobian)?
                }
            }
        };

        let used: Vec<Param> = if identified { active.clone() } else { prices.clone() };
        let spec = opts.psi;
        let (m, n) = (self.obs.len(), used.len());
        let mut r = vec![0.0; m];
        let mut jac = vec![0.0; m * n];
        self.residuals_and_jacobian(spec, &best.theta, &used, &mut r, &mut jac);
        let block_lens: Vec<usize> = self.countries.iter().map(|c| c.len).collect();
        let mean_len = m as f64 / self.countries.len() as f64;
        let nw_lag = opts.nw_lag.unwrap_or_else(|| default_nw_lag(mean_len));
        let cov = hac_covariance(&Matrix::from_row_major(m, n, jac), &r, &block_lens, nw_lag)?;

        if spec == PsiSpec::Logistic && identified {
            let extreme = self.obs.iter().filter(|o| {
                let p = logistic_psi(best.theta[KAPPA], o.z);
                !(0.001..=0.999).contains(&p)
            });
            let share = extreme.count() as f64 / m as f64;
            if share > 0.99 {
                warnings.push(format!("integration weight saturated: {:.1}% of fitted values outside [0.001, 0.999]", 100.0 * share));
            }
        }
        if !best.converged {
            warnings.push("nonlinear least squares did not reach the gradient tolerance".to_string());
        }

        let names = self.param_names();
        let all = self.all_params(true, true, true);
        let coefficients = all
            .iter()
            .map(|p| {
                let se = used.iter().position(|u| u == p).map(|k| cov[(k, k)]).filter(|v| *v > 0.0).map(math::sqrt);
                let estimate = best.theta[p.slot()];
                Coefficient { name: names[p.slot()].clone(), estimate, se, tstat: se.map(|s| estimate / s) }
            })
            .collect();

        Ok(PanelFit {
            params: self.params_from(&best.theta),
            coefficients,
            covariance: cov,
            ssr: best.ssr,
            n_obs: m,
            n_countries: self.countries.len(),
            countries: self.countries.clone(),
            mode: self.mode,
            group: self.group,
            nw_lag,
            psi: spec,
            converged: best.converged,
            identified,
            gradient_norm: inf_norm(&best.gradient),
            factor_sd: sd,
            warnings,
        })
    }

    /// The pooled optimum spread across the per-country prices, so the
    /// individual-effects fit can never end above the pooled SSR.
    fn pooled_start(&self, opts: &PanelOptions) -> Result<Vec<f64>, PanelError> {
        let pooled = PanelProblem { obs: self.obs.clone(), countries: self.countries.clone(), mode: EffectsMode::Pooled, group: self.group };
        let fit = pooled.fit(&PanelOptions { mode: EffectsMode::Pooled, ..*opts })?;
        let p = &fit.params;
        let dom = p.domestic_for("").unwrap_or(0.0);
        let mut t = vec![p.kappa, p.delta_m, p.delta_d_fx, p.delta_e_fx];
        t.extend(core::iter::repeat(dom).take(self.n_dom()));
        Ok(t)
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["kappa", "delta_m", "delta_d_fx", "delta_e_fx"].iter().map(|s| s.to_string()).collect();
        match self.mode {
            EffectsMode::Pooled => v.push("delta_dom".into()),
            EffectsMode::IndividualEffects => v.extend(self.countries.iter().map(|c| format!("delta_dom[{}]", c.id))),
        }
        v
    }

    fn params_from(&self, theta: &[f64]) -> PanelParams {
        let domestic = match self.mode {
            EffectsMode::Pooled => Domestic::Pooled(theta[FIXED]),
            EffectsMode::IndividualEffects => {
                Domestic::PerCountry(self.countries.iter().enumerate().map(|(i, c)| (c.id.clone(), theta[FIXED + i])).collect())
            }
        };
        PanelParams { kappa: theta[KAPPA], delta_m: theta[1], delta_d_fx: theta[2], delta_e_fx: theta[3], domestic }
    }

    /// Full parameter vector for `params`, in this problem's layout.
    pub fn theta_of(&self, params: &PanelParams) -> Result<Vec<f64>, PanelError> {
        let mut t = vec![params.kappa, params.delta_m, params.delta_d_fx, params.delta_e_fx];
        match self.mode {
            EffectsMode::Pooled => t.push(params.domestic_for("")?),
            EffectsMode::IndividualEffects => {
                for c in &self.countries {
                    t.push(params.domestic_for(&c.id)?);
                }
            }
        }
        Ok(t)
    }
}

struct Solution {
    theta: Vec<f64>,
    ssr: f64,
    gradient: Vec<f64>,
    converged: bool,
}

/// Panel NLS of excess returns on the step-one covariances.
pub fn estimate_panel_nls(
    covs: &CovariancePanel,
    returns: &ReturnPanel,
    factor: &FactorPanel,
    opts: &PanelOptions,
) -> Result<PanelFit, PanelError> {
    PanelProblem::build(covs, returns, factor, opts.mode, opts.group)?.fit(opts)
}

/// Fitted integration weight per country and month.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntegrationSeries {
    pub countries: BTreeMap<String, Series>,
}

/// `psi_{i,t} = logistic(kappa_hat z_{i,t-1})` over each fitted country's
/// sample.
pub fn integration_series(fit: &PanelFit, factor: &FactorPanel) -> Result<IntegrationSeries, PanelError> {
    let mut out = IntegrationSeries::default();
    for span in &fit.countries {
        let first = span.start.pred();
        let err = || DataError::FactorCoverage { country: span.id.clone(), first, last: first.offset(span.len as i64 - 1) };
        let z = factor.get(&span.id).ok_or_else(err)?.window(first, span.len).ok_or_else(err)?;
        let psi = z.iter().map(|&z| logistic_psi(fit.params.kappa, z)).collect();
        out.countries.insert(span.id.clone(), Series::new(span.start, psi));
    }
    Ok(out)
}
