//! Synthetic panels drawn from the two-layer model: asymmetric GARCH
//! innovations feeding the partially segmented pricing equation, with a known
//! logistic integration weight.
//!
//! The exchange-rate indices and the world return form one 3-variable system
//! simulated once. Each country extends it with its own return equation, so
//! the common columns of every country system are literally shared. Shocks
//! are drawn with the common variables first in the Cholesky ordering, which
//! makes the country shock an exact conditional draw given the common ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CountrySeries, FactorPanel, Group, MonthIndex, PanelViolations, ReturnPanel, Series, MIN_SERIES_LEN};
use crate::garch::{
    chol, indicators, upper_lower_factor, CountryCovariances, CovRow, CovariancePanel, GarchError, MGarchParams, Packed,
};
use crate::linalg::{clip_eigenvalues, Matrix};
use crate::panel::{logistic_psi, model_prediction, Domestic, IntegrationSeries, PanelParams};

const ST: usize = crate::garch::MAX_DIM;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("simulated path is not finite or not positive definite at t = {t}")]
    NonFinite { t: usize },
    #[error(transparent)]
    Garch(#[from] GarchError),
    #[error("{0}")]
    Panel(PanelViolations),
}

/// `z_t = mean + phi (z_{t-1} - mean) + sd u_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1 {
    pub mean: f64,
    pub phi: f64,
    pub sd: f64,
}

/// Path of `len` values starting after `z_0 = mean`.
pub fn factor_path(ar: &Ar1, len: usize, seed: u64) -> Vec<f64> {
    factor_from(ar, len, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn factor_from(ar: &Ar1, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z = ar.mean;
    (0..len)
        .map(|_| {
            let u: f64 = StandardNormal.sample(rng);
            z = ar.mean + ar.phi * (z - ar.mean) + ar.sd * u;
            z
        })
        .collect()
}

/// Simulated innovations and the covariances that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedGarch {
    pub eps: Vec<Vec<f64>>,
    pub h: Vec<Matrix>,
}

impl SimulatedGarch {
    /// `alpha + eps` as a `T x n` matrix.
    pub fn returns(&self, params: &MGarchParams) -> Matrix {
        let n = params.dim();
        let data = self.eps.iter().flat_map(|e| (0..n).map(move |i| params.alpha[i] + e[i])).collect();
        Matrix::from_row_major(self.eps.len(), n, data)
    }
}

/// Forward simulation with Gaussian shocks, starting from the unconditional
/// proxy `C'C / (1 - mean(a^2 + b^2))`.
pub fn simulate_mgarch(params: &MGarchParams, len: usize, seed: u64) -> Result<SimulatedGarch, SimulationError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.dim();
    let mut sim = Recursion::new(params);
    let mut out = SimulatedGarch { eps: Vec::with_capacity(len), h: Vec::with_capacity(len) };
    for t in 0..len {
        let h = sim.advance(t)?;
        let mut l = [0.0; ST * ST];
        if !chol(&h, n, &mut l) {
            return Err(SimulationError::NonFinite { t });
        }
        let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut e = [0.0; ST];
        for i in 0..n {
            e[i] = (0..=i).map(|k| l[i * ST + k] * u[k]).sum();
        }
        sim.record(e);
        out.eps.push(e[..n].to_vec());
        out.h.push(to_matrix(&h, n));
    }
    Ok(out)
}

fn to_matrix(m: &[f64; ST * ST], n: usize) -> Matrix {
    Matrix::from_row_major(n, n, (0..n * n).map(|k| m[(k / n) * ST + k % n]).collect())
}

fn unconditional_proxy(params: &MGarchParams) -> [f64; ST * ST] {
    let n = params.dim();
    let proxy = params.unconditional_proxy();
    let floor = 1e-10 * proxy.trace().max(f64::MIN_POSITIVE);
    let proxy = if proxy.min_eigenvalue() >= floor { proxy } else { clip_eigenvalues(&proxy, floor) };
    let mut h = [0.0; ST * ST];
    for i in 0..n {
        for j in 0..n {
            h[i * ST + j] = proxy[(i, j)];
        }
    }
    h
}

/// The covariance recursion driven by externally supplied shocks.
struct Recursion {
    p: Packed,
    h: [f64; ST * ST],
    e: [f64; ST],
    xi: [f64; ST],
    eta: [f64; ST],
}

impl Recursion {
    fn new(params: &MGarchParams) -> Self {
        Self::starting_at(params, unconditional_proxy(params))
    }

    fn starting_at(params: &MGarchParams, h1: [f64; ST * ST]) -> Self {
        Self { p: Packed::new(params), h: h1, e: [0.0; ST], xi: [0.0; ST], eta: [0.0; ST] }
    }

    /// Covariance for date `t`; the first call returns the starting value.
    fn advance(&mut self, t: usize) -> Result<[f64; ST * ST], SimulationError> {
        if t > 0 {
            let mut next = [0.0; ST * ST];
            self.p.step(&self.e, &self.xi, &self.eta, &self.h, &mut next);
            self.h = next;
        }
        if self.h.iter().any(|v| !v.is_finite()) {
            return Err(SimulationError::NonFinite { t });
        }
        Ok(self.h)
    }

    fn record(&mut self, e: [f64; ST]) {
        self.e = e;
        indicators(&e, &self.h, self.p.n, &mut self.xi, &mut self.eta);
    }
}

/// Country-specific part of a 4-variable system ordered
/// (country, fx_dev, fx_emg, world).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryGarch {
    /// First column of `C`; entries 1..3 set the country's intercept
    /// covariances with the common variables.
    pub c_col: [f64; 4],
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryDgp {
    pub id: String,
    pub group: Group,
    /// Sample length; every country ends in the panel's last month.
    pub len: usize,
    pub garch: CountryGarch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub seed: u64,
    /// Last month of every series.
    pub end: MonthIndex,
    pub burn_in: usize,
    /// 3-variable system (fx_dev, fx_emg, world); its `alpha` gives the
    /// means of the common series.
    pub common: MGarchParams,
    pub countries: Vec<CountryDgp>,
    pub prices: PanelParams,
    pub factor: Ar1,
}

impl DgpConfig {
    /// The full system of country `i`. Its mean entry is zero: the country's
    /// expected return comes from the pricing equation.
    pub fn country_params(&self, i: usize) -> MGarchParams {
        let cg = &self.countries[i].garch;
        let cm = &self.common;
        let mut c = vec![vec![0.0; 4]; 4];
        for k in 0..4 {
            c[k][0] = cg.c_col[k];
        }
        for r in 1..4 {
            for col in 1..4 {
                c[r][col] = cm.c[r - 1][col - 1];
            }
        }
        let join = |x: f64, v: &[f64]| -> Vec<f64> { core::iter::once(x).chain(v.iter().copied()).collect() };
        MGarchParams {
            alpha: join(0.0, &cm.alpha),
            c,
            a: join(cg.a, &cm.a),
            b: join(cg.b, &cm.b),
            s: join(cg.s, &cm.s),
            z: join(cg.z, &cm.z),
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::InvalidConfig(m));
        if self.common.dim() != 3 {
            return bad(format!("common system must have 3 variables, found {}", self.common.dim()));
        }
        self.common.validate()?;
        if self.countries.is_empty() {
            return bad("no countries".into());
        }
        for (i, c) in self.countries.iter().enumerate() {
            if c.len < MIN_SERIES_LEN {
                return bad(format!("{}: length {} is below {MIN_SERIES_LEN}", c.id, c.len));
            }
            self.country_params(i).validate().map_err(|e| SimulationError::InvalidConfig(format!("{}: {e}", c.id)))?;
            if self.countries[..i].iter().any(|o| o.id == c.id) {
                return bad(format!("duplicate country id {}", c.id));
            }
        }
        if !(self.factor.phi.abs() < 1.0) || !(self.factor.sd >= 0.0) || !self.factor.mean.is_finite() {
            return bad("factor process needs |phi| < 1, sd >= 0 and a finite mean".into());
        }
        let p = &self.prices;
        if ![p.kappa, p.delta_m, p.delta_d_fx, p.delta_e_fx].iter().all(|v| v.is_finite()) {
            return bad("non-finite risk price".into());
        }
        for c in &self.countries {
            if p.domestic_for(&c.id).is_err() {
                return bad(format!("no domestic price for {}", c.id));
            }
        }
        Ok(())
    }

    fn span(&self) -> usize {
        self.countries.iter().map(|c| c.len).max().unwrap_or(0)
    }

    /// A panel of `n` countries, each observed for `len` months, with
    /// realistic monthly magnitudes (percent returns, country volatility of
    /// 5 to 7 percent) and an AR(1) integration factor centred at zero.
    pub fn benchmark(n: usize, len: usize, kappa: f64, seed: u64) -> Self {
        let common_a = [0.25, 0.3, 0.3];
        let common_b = [0.93, 0.9, 0.9];
        let common_s = [0.15, 0.2, 0.25];
        let common_z = [0.1, 0.1, 0.15];
        // Long-run covariance targets of (fx_dev, fx_emg, world).
        let sd = [2.0, 2.5, 4.5];
        let corr = [[1.0, 0.4, 0.3], [0.4, 1.0, 0.3], [0.3, 0.3, 1.0]];
        let (ca, cb, cs, cz) = (0.3, 0.9, 0.2, 0.15);
        let a = |i: usize| if i == 0 { ca } else { common_a[i - 1] };
        let b = |i: usize| if i == 0 { cb } else { common_b[i - 1] };
        let s = |i: usize| if i == 0 { cs } else { common_s[i - 1] };
        let zz = |i: usize| if i == 0 { cz } else { common_z[i - 1] };

        let mut countries = Vec::with_capacity(n);
        let mut common_c = None;
        for i in 0..n {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let own_sd = 5.0 + 2.0 * frac;
            let rho = [0.1, 0.2, 0.35 + 0.2 * frac];
            let sds = [own_sd, sd[0], sd[1], sd[2]];
            let mut target = Matrix::zeros(4, 4);
            for r in 0..4 {
                for q in 0..4 {
                    let cr = match (r, q) {
                        (0, 0) => 1.0,
                        (0, k) | (k, 0) => rho[k - 1],
                        (r, q) => corr[r - 1][q - 1],
                    };
                    let decay = 1.0 - a(r) * a(q) - b(r) * b(q) - 0.5 * s(r) * s(q) - 0.8 * zz(r) * zz(q);
                    target[(r, q)] = cr * sds[r] * sds[q] * decay;
                }
            }
            let c = upper_lower_factor(&target);
            if common_c.is_none() {
                common_c = Some((1..4).map(|r| (1..4).map(|q| c[r][q]).collect::<Vec<f64>>()).collect::<Vec<_>>());
            }
            countries.push(CountryDgp {
                id: format!("C{:02}", i + 1),
                group: if i % 2 == 0 { Group::Developed } else { Group::Emerging },
                len,
                garch: CountryGarch { c_col: [c[0][0], c[1][0], c[2][0], c[3][0]], a: ca, b: cb, s: cs, z: cz },
            });
        }
        let common = MGarchParams {
            alpha: vec![0.0, 0.1, 0.5],
            c: common_c.unwrap_or_else(|| vec![vec![0.0; 3]; 3]),
            a: common_a.to_vec(),
            b: common_b.to_vec(),
            s: common_s.to_vec(),
            z: common_z.to_vec(),
        };
        let factor_sd = if kappa != 0.0 { 2.0 / kappa.abs() } else { 4.0 };
        let phi = 0.9;
        DgpConfig {
            seed,
            end: MonthIndex::new(2020, 12).expect("valid month"),
            burn_in: 200,
            common,
            countries,
            prices: PanelParams { kappa, delta_m: 0.12, delta_d_fx: 0.1, delta_e_fx: 0.05, domestic: Domestic::Pooled(0.01) },
            factor: Ar1 { mean: 0.0, phi, sd: factor_sd * crate::math::sqrt(1.0 - phi * phi) },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub returns: ReturnPanel,
    pub factor: FactorPanel,
    /// The covariances that generated each country's returns.
    pub true_covariances: CovariancePanel,
    pub true_psi: IntegrationSeries,
    pub config: DgpConfig,
}

const COMMON_STREAM: u64 = 0;
const SHOCK_STREAM: u64 = 1;
const FACTOR_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// FNV-1a, used to give each country id its own key.
fn country_key(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// Draws the full panel. Each country's random streams are keyed by its id,
/// so results do not depend on the order in which countries are generated.
pub fn simulate_panel(config: &DgpConfig) -> Result<SyntheticDataset, SimulationError> {
    config.validate()?;
    let span = config.span();
    let total = config.burn_in + span;
    let start = config.end.offset(-(span as i64) + 1);

    // Common block: shocks u and innovations e for every date.
    let mut common = Recursion::new(&config.common);
    let mut common_u = Vec::with_capacity(total);
    let mut common_e = Vec::with_capacity(total);
    let mut rng = stream(config.seed, COMMON_STREAM);
    for t in 0..total {
        let h = common.advance(t)?;
        let mut l = [0.0; ST * ST];
        if !chol(&h, 3, &mut l) {
            return Err(SimulationError::NonFinite { t });
        }
        let u: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let mut e = [0.0; ST];
        for i in 0..3 {
            e[i] = (0..=i).map(|k| l[i * ST + k] * u[k]).sum();
        }
        common.record(e);
        common_u.push(u);
        common_e.push(e);
    }
    let common_series = |k: usize| -> Series {
        let alpha = config.common.alpha[k];
        Series::new(start, common_e[config.burn_in..].iter().map(|e| alpha + e[k]).collect())
    };
    let (fx_dev, fx_emg, world) = (common_series(0), common_series(1), common_series(2));

    let mut countries = Vec::with_capacity(config.countries.len());
    let mut factor = FactorPanel::new();
    let mut covs = CovariancePanel::default();
    let mut psi_out = IntegrationSeries::default();
    let common_h1 = unconditional_proxy(&config.common);
    for (i, dgp) in config.countries.iter().enumerate() {
        let params = config.country_params(i);
        let offset = total - dgp.len;
        let c_start = config.end.offset(-(dgp.len as i64) + 1);

        let key = country_key(config.seed, &dgp.id);
        let mut zrng = stream(key, FACTOR_STREAM);
        let z = factor_from(&config.factor, span + 1, &mut zrng);
        // z[k] is the factor at start - 1 + k.
        let z = &z[span - dgp.len..];
        factor.insert(dgp.id.clone(), Series::new(c_start.pred(), z.to_vec()));

        // Country system: common block of H_1 shared with the common draw.
        let mut h1 = unconditional_proxy(&params);
        for r in 1..4 {
            for q in 1..4 {
                h1[r * ST + q] = common_h1[(r - 1) * ST + (q - 1)];
            }
        }
        let h1 = clip_if_needed(h1);
        let mut rec = Recursion::starting_at(&params, h1);
        let mut urng = stream(key, SHOCK_STREAM);
        let mut rows = Vec::with_capacity(dgp.len);
        let mut returns = Vec::with_capacity(dgp.len);
        let mut psis = Vec::with_capacity(dgp.len);
        for t in 0..total {
            let h = rec.advance(t)?;
            // Cholesky in the order (fx_dev, fx_emg, world, country).
            let perm = [1, 2, 3, 0];
            let mut hp = [0.0; ST * ST];
            for r in 0..4 {
                for q in 0..4 {
                    hp[r * ST + q] = h[perm[r] * ST + perm[q]];
                }
            }
            let mut l = [0.0; ST * ST];
            if !chol(&hp, 4, &mut l) {
                return Err(SimulationError::NonFinite { t });
            }
            let own: f64 = StandardNormal.sample(&mut urng);
            let u = common_u[t];
            let eps_i = l[3 * ST] * u[0] + l[3 * ST + 1] * u[1] + l[3 * ST + 2] * u[2] + l[3 * ST + 3] * own;
            let ce = common_e[t];
            rec.record([eps_i, ce[0], ce[1], ce[2]]);
            if t >= offset {
                let k = t - offset;
                let row = CovRow::from_h(&to_matrix(&h, 4));
                let psi = logistic_psi(config.prices.kappa, z[k]);
                let mean = model_prediction(&config.prices, &row, psi, &dgp.id).map_err(|e| SimulationError::InvalidConfig(format!("{e}")))?;
                rows.push(row);
                psis.push(psi);
                returns.push(mean + eps_i);
            }
        }
        covs.countries.insert(dgp.id.clone(), CountryCovariances { start: c_start, rows });
        psi_out.countries.insert(dgp.id.clone(), Series::new(c_start, psis));
        countries.push(CountrySeries { id: dgp.id.clone(), group: dgp.group, series: Series::new(c_start, returns) });
    }
    let returns = ReturnPanel::new(countries, world, fx_dev, fx_emg).map_err(SimulationError::Panel)?;
    Ok(SyntheticDataset { returns, factor, true_covariances: covs, true_psi: psi_out, config: config.clone() })
}

fn clip_if_needed(h: [f64; ST * ST]) -> [f64; ST * ST] {
    let m = to_matrix(&h, 4);
    let floor = 1e-10 * m.trace();
    if m.cholesky().is_ok() && m.min_eigenvalue() >= floor {
        return h;
    }
    let c = clip_eigenvalues(&m, floor);
    let mut out = [0.0; ST * ST];
    for i in 0..4 {
        for j in 0..4 {
            out[i * ST + j] = c[(i, j)];
        }
    }
    out
}
