//! Monthly panel data: calendar months, contiguous series, and the unbalanced
//! country panel with its common world and exchange-rate series.
//!
//! All returns are percent per month. Country and world series are excess
//! returns over the risk-free rate once a panel has been built.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Shortest country series accepted for estimation.
pub const MIN_SERIES_LEN: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid month {0:?}: expected YYYY-MM")]
    InvalidMonth(String),
    #[error("series {series}: missing month {month} inside its range")]
    Gap { series: String, month: MonthIndex },
    #[error("series {series}: month {month} appears more than once")]
    Duplicate { series: String, month: MonthIndex },
    #[error("no {0} series in the input")]
    MissingCommonSeries(SeriesRole),
    #[error("series {series} runs {start}..{end} but {common} only covers {common_start}..{common_end}")]
    Coverage {
        series: String,
        start: MonthIndex,
        end: MonthIndex,
        common: SeriesRole,
        common_start: MonthIndex,
        common_end: MonthIndex,
    },
    #[error("series {series} has {len} months, at least {min} are required")]
    TooShort { series: String, len: usize, min: usize },
    #[error("series {0} has no metadata row")]
    NoMetadata(String),
    #[error("series {0} is declared more than once in the metadata")]
    DuplicateMetadata(String),
    #[error("series {series}: value at {month} is not finite")]
    NonFinite { series: String, month: MonthIndex },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown country {0}")]
    UnknownCountry(String),
    #[error("factor for {country} must cover {first}..{last} (one month before each return)")]
    FactorCoverage { country: String, first: MonthIndex, last: MonthIndex },
}

/// Everything wrong with a set of input records, in discovery order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelViolations(pub Vec<DataError>);

impl fmt::Display for PanelViolations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl core::error::Error for PanelViolations {}

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthIndex {
    year: i32,
    month: u8,
}

impl MonthIndex {
    pub fn new(year: i32, month: u32) -> Result<Self, DataError> {
        if !(1..=12).contains(&month) {
            return Err(DataError::InvalidMonth(alloc::format!("{year}-{month}")));
        }
        Ok(Self { year, month: month as u8 })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month as u32
    }

    /// Months since year 0, January.
    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        let year = ord.div_euclid(12);
        let month = ord.rem_euclid(12) + 1;
        Self { year: year as i32, month: month as u8 }
    }

    pub fn offset(self, months: i64) -> Self {
        Self::from_ordinal(self.ordinal() + months)
    }

    pub fn succ(self) -> Self {
        self.offset(1)
    }

    pub fn pred(self) -> Self {
        self.offset(-1)
    }

    /// Signed number of months from `self` to `later`.
    pub fn months_until(self, later: MonthIndex) -> i64 {
        later.ordinal() - self.ordinal()
    }
}

impl fmt::Display for MonthIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for MonthIndex {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidMonth(s.to_string());
        let s = s.trim();
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        MonthIndex::new(year, month).map_err(|_| bad())
    }
}

impl Serialize for MonthIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthIndex {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A contiguous monthly series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub start: MonthIndex,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(start: MonthIndex, values: Vec<f64>) -> Self {
        Self { start, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Last month covered. Equals `start` for an empty series.
    pub fn end(&self) -> MonthIndex {
        self.start.offset(self.values.len().saturating_sub(1) as i64)
    }

    pub fn month_at(&self, k: usize) -> MonthIndex {
        self.start.offset(k as i64)
    }

    pub fn get(&self, month: MonthIndex) -> Option<f64> {
        let k = self.start.months_until(month);
        if k < 0 {
            return None;
        }
        self.values.get(k as usize).copied()
    }

    /// `len` consecutive values starting at `from`, if covered.
    pub fn window(&self, from: MonthIndex, len: usize) -> Option<&[f64]> {
        let k = self.start.months_until(from);
        if k < 0 || k as usize + len > self.values.len() {
            return None;
        }
        Some(&self.values[k as usize..k as usize + len])
    }

    pub fn covers(&self, first: MonthIndex, last: MonthIndex) -> bool {
        !self.is_empty() && self.start <= first && last <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Developed,
    Emerging,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Developed => "developed",
            Group::Emerging => "emerging",
        }
    }
}

/// The role a series plays in the input metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesRole {
    Developed,
    Emerging,
    World,
    FxDev,
    FxEmg,
    Riskfree,
}

impl SeriesRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesRole::Developed => "developed",
            SeriesRole::Emerging => "emerging",
            SeriesRole::World => "world",
            SeriesRole::FxDev => "fx_dev",
            SeriesRole::FxEmg => "fx_emg",
            SeriesRole::Riskfree => "riskfree",
        }
    }

    pub fn country_group(self) -> Option<Group> {
        match self {
            SeriesRole::Developed => Some(Group::Developed),
            SeriesRole::Emerging => Some(Group::Emerging),
            _ => None,
        }
    }
}

impl fmt::Display for SeriesRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeriesRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "developed" => SeriesRole::Developed,
            "emerging" => SeriesRole::Emerging,
            "world" => SeriesRole::World,
            "fx_dev" => SeriesRole::FxDev,
            "fx_emg" => SeriesRole::FxEmg,
            "riskfree" => SeriesRole::Riskfree,
            other => return Err(alloc::format!("unknown series group {other:?}")),
        })
    }
}

/// One row of the long-format input.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub date: MonthIndex,
    pub series_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySeries {
    pub id: String,
    pub group: Group,
    pub series: Series,
}

impl CountrySeries {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn start(&self) -> MonthIndex {
        self.series.start
    }

    pub fn end(&self) -> MonthIndex {
        self.series.end()
    }
}

/// Country excess returns plus the three common series.
///
/// Countries are kept sorted by id. The common series cover every country's
/// range; panels are immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPanel {
    countries: Vec<CountrySeries>,
    world: Series,
    fx_dev: Series,
    fx_emg: Series,
}

impl ReturnPanel {
    /// Validates coverage and length, then assembles the panel.
    pub fn new(
        mut countries: Vec<CountrySeries>,
        world: Series,
        fx_dev: Series,
        fx_emg: Series,
    ) -> Result<Self, PanelViolations> {
        countries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut errors = Vec::new();
        for c in &countries {
            if c.len() < MIN_SERIES_LEN {
                errors.push(DataError::TooShort {
                    series: c.id.clone(),
                    len: c.len(),
                    min: MIN_SERIES_LEN,
                });
                continue;
            }
            for (role, common) in [
                (SeriesRole::World, &world),
                (SeriesRole::FxDev, &fx_dev),
                (SeriesRole::FxEmg, &fx_emg),
            ] {
                if !common.covers(c.start(), c.end()) {
                    errors.push(DataError::Coverage {
                        series: c.id.clone(),
                        start: c.start(),
                        end: c.end(),
                        common: role,
                        common_start: common.start,
                        common_end: common.end(),
                    });
                }
            }
        }
        for w in countries.windows(2) {
            if w[0].id == w[1].id {
                errors.push(DataError::DuplicateMetadata(w[0].id.clone()));
            }
        }
        if errors.is_empty() {
            Ok(Self { countries, world, fx_dev, fx_emg })
        } else {
            Err(PanelViolations(errors))
        }
    }

    pub fn countries(&self) -> &[CountrySeries] {
        &self.countries
    }

    pub fn country(&self, id: &str) -> Result<&CountrySeries, DataError> {
        self.countries
            .binary_search_by(|c| c.id.as_str().cmp(id))
            .map(|k| &self.countries[k])
            .map_err(|_| DataError::UnknownCountry(id.to_string()))
    }

    pub fn world(&self) -> &Series {
        &self.world
    }

    pub fn fx_dev(&self) -> &Series {
        &self.fx_dev
    }

    pub fn fx_emg(&self) -> &Series {
        &self.fx_emg
    }

    /// Rows of (country excess, fx_dev, fx_emg, world excess) over the
    /// country's own range, in month order.
    pub fn align(&self, country: &str) -> Result<Vec<[f64; 4]>, DataError> {
        let c = self.country(country)?;
        let n = c.len();
        // Coverage is checked at construction.
        let d = self.fx_dev.window(c.start(), n).expect("fx_dev covers country");
        let e = self.fx_emg.window(c.start(), n).expect("fx_emg covers country");
        let m = self.world.window(c.start(), n).expect("world covers country");
        Ok((0..n).map(|k| [c.series.values[k], d[k], e[k], m[k]]).collect())
    }

    /// Long-format records and metadata that rebuild this panel.
    pub fn to_records(&self) -> (Vec<Record>, Vec<(String, SeriesRole)>) {
        let mut records = Vec::new();
        let mut meta = Vec::new();
        let mut push = |id: &str, role: SeriesRole, s: &Series| {
            meta.push((id.to_string(), role));
            for (k, &v) in s.values.iter().enumerate() {
                records.push(Record { date: s.month_at(k), series_id: id.to_string(), value: v });
            }
        };
        push("world", SeriesRole::World, &self.world);
        push("fx_dev", SeriesRole::FxDev, &self.fx_dev);
        push("fx_emg", SeriesRole::FxEmg, &self.fx_emg);
        for c in &self.countries {
            let role = match c.group {
                Group::Developed => SeriesRole::Developed,
                Group::Emerging => SeriesRole::Emerging,
            };
            push(&c.id, role, &c.series);
        }
        (records, meta)
    }
}

/// Elementwise `total - riskfree`.
pub fn excess_returns(total: &[f64], riskfree: &[f64]) -> Result<Vec<f64>, DataError> {
    if total.len() != riskfree.len() {
        return Err(DataError::LengthMismatch { left: total.len(), right: riskfree.len() });
    }
    Ok(total.iter().zip(riskfree).map(|(x, r)| x - r).collect())
}

/// Sorts one series' observations and checks them for duplicates, gaps and
/// non-finite values.
fn contiguous(id: &str, mut obs: Vec<(MonthIndex, f64)>, errors: &mut Vec<DataError>) -> Option<Series> {
    obs.sort_by(|a, b| a.0.cmp(&b.0));
    let before = errors.len();
    for w in obs.windows(2) {
        let step = w[0].0.months_until(w[1].0);
        if step == 0 {
            errors.push(DataError::Duplicate { series: id.to_string(), month: w[0].0 });
        } else if step > 1 {
            errors.push(DataError::Gap { series: id.to_string(), month: w[0].0.succ() });
        }
    }
    for (m, v) in &obs {
        if !v.is_finite() {
            errors.push(DataError::NonFinite { series: id.to_string(), month: *m });
        }
    }
    if errors.len() > before || obs.is_empty() {
        return None;
    }
    let start = obs[0].0;
    Some(Series::new(start, obs.into_iter().map(|(_, v)| v).collect()))
}

/// Builds a panel from long-format records.
///
/// When a `riskfree` series is declared, country and world values are read as
/// total returns and converted to excess returns month by month; otherwise
/// they are taken to be excess returns already. Exchange-rate index returns
/// are never adjusted.
pub fn build_panel(
    records: &[Record],
    metadata: &[(String, SeriesRole)],
) -> Result<ReturnPanel, PanelViolations> {
    let mut errors = Vec::new();
    let mut roles: BTreeMap<&str, SeriesRole> = BTreeMap::new();
    for (id, role) in metadata {
        if roles.insert(id.as_str(), *role).is_some() {
            errors.push(DataError::DuplicateMetadata(id.clone()));
        }
    }

    let mut grouped: BTreeMap<&str, Vec<(MonthIndex, f64)>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.series_id.as_str()).or_default().push((r.date, r.value));
    }
    for id in grouped.keys() {
        if !roles.contains_key(id) {
            errors.push(DataError::NoMetadata(id.to_string()));
        }
    }

    let mut series: BTreeMap<&str, Series> = BTreeMap::new();
    for (id, obs) in grouped {
        if let Some(s) = contiguous(id, obs, &mut errors) {
            series.insert(id, s);
        }
    }

    let common = |role: SeriesRole, errors: &mut Vec<DataError>| -> Option<(String, Series)> {
        let found = roles.iter().find(|(_, r)| **r == role).map(|(id, _)| *id);
        match found.and_then(|id| series.get(id).map(|s| (id.to_string(), s.clone()))) {
            Some(s) => Some(s),
            None => {
                // A declared series that failed validation is already reported.
                if found.map_or(true, |id| !errors.iter().any(|e| names_series(e, id))) {
                    errors.push(DataError::MissingCommonSeries(role));
                }
                None
            }
        }
    };
    let world = common(SeriesRole::World, &mut errors);
    let fx_dev = common(SeriesRole::FxDev, &mut errors);
    let fx_emg = common(SeriesRole::FxEmg, &mut errors);
    let riskfree = roles
        .iter()
        .find(|(_, r)| **r == SeriesRole::Riskfree)
        .and_then(|(id, _)| series.get(id).cloned());

    let to_excess = |id: &str, s: &Series, errors: &mut Vec<DataError>| -> Option<Series> {
        let Some(rf) = &riskfree else { return Some(s.clone()) };
        match rf.window(s.start, s.len()) {
            Some(r) => excess_returns(&s.values, r).ok().map(|v| Series::new(s.start, v)),
            None => {
                errors.push(DataError::Coverage {
                    series: id.to_string(),
                    start: s.start,
                    end: s.end(),
                    common: SeriesRole::Riskfree,
                    common_start: rf.start,
                    common_end: rf.end(),
                });
                None
            }
        }
    };

    let world = world.and_then(|(id, s)| to_excess(&id, &s, &mut errors));
    let mut countries = Vec::new();
    for (id, role) in &roles {
        let Some(group) = role.country_group() else { continue };
        let Some(s) = series.get(id) else { continue };
        if let Some(s) = to_excess(id, s, &mut errors) {
            countries.push(CountrySeries { id: id.to_string(), group, series: s });
        }
    }

    match (world, fx_dev, fx_emg) {
        (Some(world), Some((_, fx_dev)), Some((_, fx_emg))) if errors.is_empty() => {
            ReturnPanel::new(countries, world, fx_dev, fx_emg)
        }
        _ => Err(PanelViolations(errors)),
    }
}

fn names_series(e: &DataError, id: &str) -> bool {
    match e {
        DataError::Gap { series, .. }
        | DataError::Duplicate { series, .. }
        | DataError::NonFinite { series, .. } => series == id,
        _ => false,
    }
}

/// One candidate integration factor per country.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FactorPanel {
    series: BTreeMap<String, Series>,
}

impl FactorPanel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, country: impl Into<String>, series: Series) {
        self.series.insert(country.into(), series);
    }

    pub fn get(&self, country: &str) -> Option<&Series> {
        self.series.get(country)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Series)> {
        self.series.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Factor values lagged one month against the country's returns: entry
    /// `k` is the factor at `start + k - 1`.
    pub fn lagged(&self, country: &CountrySeries) -> Result<&[f64], DataError> {
        let first = country.start().pred();
        let err = || DataError::FactorCoverage {
            country: country.id.clone(),
            first,
            last: country.end().pred(),
        };
        self.series
            .get(&country.id)
            .ok_or_else(err)?
            .window(first, country.len())
            .ok_or_else(err)
    }

    /// Builds a factor panel from long-format records, one series per id.
    pub fn from_records(records: &[Record]) -> Result<Self, PanelViolations> {
        let mut grouped: BTreeMap<&str, Vec<(MonthIndex, f64)>> = BTreeMap::new();
        for r in records {
            grouped.entry(r.series_id.as_str()).or_default().push((r.date, r.value));
        }
        let mut errors = Vec::new();
        let mut out = Self::new();
        for (id, obs) in grouped {
            if let Some(s) = contiguous(id, obs, &mut errors) {
                out.insert(id, s);
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(PanelViolations(errors))
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (id, s) in &self.series {
            for (k, &v) in s.values.iter().enumerate() {
                out.push(Record { date: s.month_at(k), series_id: id.clone(), value: v });
            }
        }
        out
    }
}
