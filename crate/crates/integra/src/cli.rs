//! Subcommands. Each one reads its inputs, checks them against any manifest
//! that produced them, writes its artifacts and a manifest next to them.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use integra_core::data::{build_panel, FactorPanel, MonthIndex, ReturnPanel, SeriesRole};
use integra_core::garch::{estimate_mgarch, extract_covariances, GarchOptions, MGarchFit, MGarchParams};
use integra_core::linalg::Matrix;
use integra_core::panel::{estimate_panel_nls, stars, EffectsMode, GroupFilter, PanelFit, PanelOptions};
use integra_core::simulate::{simulate_panel, DgpConfig};
use integra_core::stats::describe;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Diagnostic};
use crate::io;
use crate::manifest::{self, ManifestBuilder, DIR_MANIFEST};

#[derive(Debug, Parser)]
#[command(name = "integra", version, about = "Two-step estimation of time-varying stock market integration")]
pub struct Cli {
    /// Worker threads for per-country jobs (default: available parallelism).
    #[arg(long, global = true, env = "INTEGRA_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Descriptive statistics per series.
    Stats(StatsArgs),
    /// Fit the asymmetric GARCH system of every country.
    EstimateGarch(GarchArgs),
    /// Panel NLS of returns on the fitted covariances.
    EstimatePanel(PanelArgs),
    /// Draw a synthetic dataset from a known model.
    Simulate(SimulateArgs),
    /// Table of fits found in a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub returns: PathBuf,
    /// Adds each series' group to the table.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GarchArgs {
    /// Directory holding returns.csv and meta.csv.
    #[arg(long = "in", conflicts_with_all = ["returns", "meta"], required_unless_present = "returns")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "meta")]
    pub returns: Option<PathBuf>,
    #[arg(long, requires = "returns")]
    pub meta: Option<PathBuf>,
    /// Output directory for cov.csv and garch_fits.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    /// Jittered restarts besides the default start.
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Pooled,
    Individual,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupArg {
    All,
    Developed,
    Emerging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NwLag {
    Auto,
    Fixed(usize),
}

fn parse_nw_lag(s: &str) -> Result<NwLag, String> {
    match s {
        "auto" => Ok(NwLag::Auto),
        n => n.parse().map(NwLag::Fixed).map_err(|_| format!("expected `auto` or a lag, found {n:?}")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PanelArgs {
    #[arg(long)]
    pub cov: PathBuf,
    #[arg(long)]
    pub returns: PathBuf,
    #[arg(long)]
    pub factor: PathBuf,
    /// Defaults to meta.csv next to the returns file.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "all")]
    pub group: GroupArg,
    #[arg(long, value_parser = parse_nw_lag, default_value = "auto")]
    pub nw_lag: NwLag,
    /// Label used in reports; defaults to the factor file's stem.
    #[arg(long)]
    pub factor_name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["config", "benchmark"]))]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in panel with realistic monthly magnitudes.
    #[arg(long)]
    pub benchmark: bool,
    #[arg(long, default_value_t = 30, requires = "benchmark")]
    pub countries: usize,
    #[arg(long, default_value_t = 300, requires = "benchmark")]
    pub len: usize,
    #[arg(long, default_value_t = 0.5, requires = "benchmark")]
    pub kappa: f64,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs.filter(|&j| j > 0) {
        pool = pool.num_threads(j);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&cli.command)),
        Err(e) => Err(CliError::Usage { message: format!("cannot start worker pool: {e}") }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            for d in e.diagnostics() {
                d.emit();
            }
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Stats(a) => stats(a),
        Command::EstimateGarch(a) => estimate_garch(a),
        Command::EstimatePanel(a) => estimate_panel(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    }
}

fn options<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialise")
}

fn checked_input(builder: &mut ManifestBuilder, path: &Path) -> Result<(), CliError> {
    manifest::verify(path)?;
    builder.input(path)
}

fn load_panel(returns: &Path, meta: &Path) -> Result<ReturnPanel, CliError> {
    let records = io::read_long(returns)?;
    let meta_rows = io::read_meta(meta)?;
    build_panel(&records, &meta_rows).map_err(|v| CliError::violations(Some(returns), v))
}

fn emit_table(out: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    match out {
        Some(p) => io::write_table(p, header, rows),
        None => {
            let bytes = io::table_bytes(header, rows)?;
            std::io::stdout().write_all(&bytes).map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

pub const STATS_HEADER: [&str; 14] = [
    "series_id",
    "group",
    "start",
    "end",
    "n",
    "mean",
    "std",
    "skewness",
    "excess_kurtosis",
    "jarque_bera",
    "jb_p",
    "autocorr1",
    "ljung_box_12",
    "lb_p",
];

fn stats(args: &StatsArgs) -> Result<(), CliError> {
    let mut builder = ManifestBuilder::new("stats", options(args));
    checked_input(&mut builder, &args.returns)?;
    let records = io::read_long(&args.returns)?;
    let groups: BTreeMap<String, SeriesRole> = match &args.meta {
        Some(m) => {
            checked_input(&mut builder, m)?;
            io::read_meta(m)?.into_iter().collect()
        }
        None => BTreeMap::new(),
    };
    // Any long-format file splits into contiguous series the same way.
    let series = FactorPanel::from_records(&records).map_err(|v| CliError::violations(Some(&args.returns), v))?;
    let mut rows = Vec::new();
    for (id, s) in series.iter() {
        let d = describe(&s.values).map_err(|e| CliError::domain(Some(&args.returns), format!("{id}: {e}")))?;
        let mut row = vec![
            id.to_string(),
            groups.get(id).map_or(String::new(), |r| r.to_string()),
            s.start.to_string(),
            s.end().to_string(),
            d.n.to_string(),
        ];
        row.extend(
            [d.mean, d.std, d.skewness, d.excess_kurtosis, d.jarque_bera, d.jb_p, d.autocorr1, d.ljung_box_12, d.lb_p]
                .map(io::fmt_f64),
        );
        rows.push(row);
    }
    emit_table(args.out.as_deref(), &STATS_HEADER, &rows)?;
    if let Some(out) = &args.out {
        builder.write(&manifest::sidecar(out), &[out.clone()])?;
    }
    Ok(())
}

/// One country's entry in `garch_fits.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountryFit {
    pub start: MonthIndex,
    pub n_obs: usize,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Variables ordered (country, fx_dev, fx_emg, world).
    pub params: MGarchParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarchFitsFile {
    pub options: GarchOptions,
    pub countries: BTreeMap<String, CountryFit>,
}

fn estimate_garch(args: &GarchArgs) -> Result<(), CliError> {
    let (returns, meta) = match (&args.input, &args.returns, &args.meta) {
        (Some(dir), _, _) => (dir.join("returns.csv"), dir.join("meta.csv")),
        (None, Some(r), Some(m)) => (r.clone(), m.clone()),
        _ => return Err(CliError::Usage { message: "either --in or both --returns and --meta are required".into() }),
    };
    let mut builder = ManifestBuilder::new("estimate-garch", options(args));
    checked_input(&mut builder, &returns)?;
    checked_input(&mut builder, &meta)?;
    let panel = load_panel(&returns, &meta)?;
    let opts = GarchOptions { max_iter: args.max_iter, restarts: args.restarts, gtol: GarchOptions::default().gtol, seed: args.seed };

    let fits: Vec<(String, MonthIndex, MGarchFit)> = panel
        .countries()
        .par_iter()
        .map(|c| {
            let rows = panel.align(&c.id).map_err(|e| CliError::domain(Some(&returns), e.to_string()))?;
            let data = Matrix::from_row_major(rows.len(), 4, rows.concat());
            let fit = estimate_mgarch(&data, &opts).map_err(|e| CliError::domain(Some(&returns), format!("{}: {e}", c.id)))?;
            Ok((c.id.clone(), c.start(), fit))
        })
        .collect::<Result<_, CliError>>()?;

    for (id, _, fit) in &fits {
        if !fit.converged {
            Diagnostic::warning(
                "not_converged",
                Some(&returns),
                format!("{id}: estimation stopped with gradient norm {:.3e} after {} iterations", fit.gradient_norm, fit.iterations),
            )
            .emit();
        }
    }

    let covs = extract_covariances(fits.iter().map(|(id, start, fit)| (id.as_str(), *start, fit)));
    let file = GarchFitsFile {
        options: opts,
        countries: fits
            .iter()
            .map(|(id, start, f)| {
                let entry = CountryFit {
                    start: *start,
                    n_obs: f.n_obs,
                    loglik: f.loglik,
                    converged: f.converged,
                    iterations: f.iterations,
                    gradient_norm: f.gradient_norm,
                    params: f.params.clone(),
                };
                (id.clone(), entry)
            })
            .collect(),
    };
    let cov_path = args.out.join("cov.csv");
    let fits_path = args.out.join("garch_fits.json");
    io::write_cov(&cov_path, &covs)?;
    io::write_json(&fits_path, &file)?;
    builder.write(&args.out.join(DIR_MANIFEST), &[cov_path, fits_path])?;
    Ok(())
}

/// Contents of a fit file written by `estimate-panel`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    pub factor: String,
    pub fit: PanelFit,
    /// Significance marks per coefficient: `*` 1%, `**` 5%, `***` 10%.
    pub stars: BTreeMap<String, String>,
    pub caveat: String,
}

const CAVEAT: &str = "Standard errors treat the step-one covariances as known; estimation error from step one is not propagated.";

fn estimate_panel(args: &PanelArgs) -> Result<(), CliError> {
    let meta = match &args.meta {
        Some(m) => m.clone(),
        None => args.returns.with_file_name("meta.csv"),
    };
    let mut builder = ManifestBuilder::new("estimate-panel", options(args));
    for p in [&args.cov, &args.returns, &meta, &args.factor] {
        checked_input(&mut builder, p)?;
    }
    let covs = io::read_cov(&args.cov)?;
    let panel = load_panel(&args.returns, &meta)?;
    let factor_records = io::read_long(&args.factor)?;
    let factor = FactorPanel::from_records(&factor_records).map_err(|v| CliError::violations(Some(&args.factor), v))?;

    let opts = PanelOptions {
        mode: match args.mode {
            ModeArg::Pooled => EffectsMode::Pooled,
            ModeArg::Individual => EffectsMode::IndividualEffects,
        },
        group: match args.group {
            GroupArg::All => GroupFilter::All,
            GroupArg::Developed => GroupFilter::Developed,
            GroupArg::Emerging => GroupFilter::Emerging,
        },
        nw_lag: match args.nw_lag {
            NwLag::Auto => None,
            NwLag::Fixed(l) => Some(l),
        },
        ..PanelOptions::default()
    };
    let fit = estimate_panel_nls(&covs, &panel, &factor, &opts).map_err(|e| CliError::domain(Some(&args.cov), e.to_string()))?;
    for w in &fit.warnings {
        Diagnostic::warning("fit", Some(&args.out), w.clone()).emit();
    }
    let stars = fit
        .coefficients
        .iter()
        .filter_map(|c| c.tstat.map(|t| (c.name.clone(), stars(t).to_string())))
        .collect();
    let name = args.factor_name.clone().unwrap_or_else(|| {
        args.factor.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let file = FitFile { factor: name, fit, stars, caveat: CAVEAT.into() };
    io::write_json(&args.out, &file)?;
    builder.write(&manifest::sidecar(&args.out), &[args.out.clone()])?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl PsiSummary {
    fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, min, max }
    }
}

/// `truth.json`: what generated the simulated files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub config: DgpConfig,
    /// Full 4-variable system per country, ordered (country, fx_dev, fx_emg, world).
    pub garch: BTreeMap<String, MGarchParams>,
    pub psi: PsiSummary,
    pub psi_by_country: BTreeMap<String, PsiSummary>,
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut builder = ManifestBuilder::new("simulate", options(args));
    let mut config = match &args.config {
        Some(path) => {
            checked_input(&mut builder, path)?;
            io::read_json::<DgpConfig>(path)?
        }
        None => DgpConfig::benchmark(args.countries, args.len, args.kappa, 0),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let file = args.config.as_deref();
    let data = simulate_panel(&config).map_err(|e| CliError::domain(file, e.to_string()))?;

    let (records, meta) = data.returns.to_records();
    let all_psi: Vec<f64> = data.true_psi.countries.values().flat_map(|s| s.values.iter().copied()).collect();
    let truth = Truth {
        garch: config.countries.iter().enumerate().map(|(i, c)| (c.id.clone(), config.country_params(i))).collect(),
        psi: PsiSummary::of(&all_psi),
        psi_by_country: data.true_psi.countries.iter().map(|(id, s)| (id.clone(), PsiSummary::of(&s.values))).collect(),
        config,
    };

    let dir = &args.out_dir;
    let paths: Vec<PathBuf> = ["returns.csv", "meta.csv", "factor.csv", "true_cov.csv", "truth.json"].iter().map(|f| dir.join(f)).collect();
    io::write_long(&paths[0], &records)?;
    io::write_meta(&paths[1], &meta)?;
    io::write_long(&paths[2], &data.factor.to_records())?;
    io::write_cov(&paths[3], &data.true_covariances)?;
    io::write_json(&paths[4], &truth)?;
    builder.write(&dir.join(DIR_MANIFEST), &paths)?;
    Ok(())
}

pub const REPORT_HEADER: [&str; 11] = [
    "factor",
    "group",
    "mode",
    "kappa",
    "delta_m",
    "delta_d_fx",
    "delta_e_fx",
    "delta_dom",
    "n_obs",
    "n_countries",
    "warning",
];

/// `estimate (se)` with the significance marks of the published tables.
/// Unidentified fits carry no marks.
pub fn format_cell(fit: &PanelFit, name: &str) -> String {
    let Some(c) = fit.coefficient(name) else { return String::new() };
    let marks = match c.tstat {
        Some(t) if fit.identified => stars(t),
        _ => "",
    };
    match c.se {
        Some(se) => format!("{:.4}{marks} ({se:.4})", c.estimate),
        None => format!("{:.4}", c.estimate),
    }
}

fn mode_name(m: EffectsMode) -> &'static str {
    match m {
        EffectsMode::Pooled => "pooled",
        EffectsMode::IndividualEffects => "individual",
    }
}

fn report(args: &ReportArgs) -> Result<(), CliError> {
    let mut builder = ManifestBuilder::new("report", options(args));
    let entries = fs::read_dir(&args.dir).map_err(|e| CliError::io(&args.dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| CliError::io(&args.dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "json") && !manifest::is_manifest(&p) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::EmptyDirectory(args.dir.clone()));
    }
    let mut fits = Vec::new();
    for p in &paths {
        checked_input(&mut builder, p)?;
        fits.push(io::read_json::<FitFile>(p)?);
    }
    fits.sort_by(|a, b| {
        (&a.factor, a.fit.group.as_str(), mode_name(a.fit.mode)).cmp(&(&b.factor, b.fit.group.as_str(), mode_name(b.fit.mode)))
    });
    let rows: Vec<Vec<String>> = fits
        .iter()
        .map(|f| {
            let fit = &f.fit;
            let dom = match fit.mode {
                EffectsMode::Pooled => format_cell(fit, "delta_dom"),
                EffectsMode::IndividualEffects => "per country".to_string(),
            };
            let mut warning: Vec<String> = Vec::new();
            if !fit.identified {
                warning.push("unidentified".into());
            }
            warning.extend(fit.warnings.iter().cloned());
            vec![
                f.factor.clone(),
                fit.group.as_str().to_string(),
                mode_name(fit.mode).to_string(),
                format_cell(fit, "kappa"),
                format_cell(fit, "delta_m"),
                format_cell(fit, "delta_d_fx"),
                format_cell(fit, "delta_e_fx"),
                dom,
                fit.n_obs.to_string(),
                fit.n_countries.to_string(),
                warning.join("; "),
            ]
        })
        .collect();
    emit_table(args.out.as_deref(), &REPORT_HEADER, &rows)?;
    if let Some(out) = &args.out {
        builder.write(&manifest::sidecar(out), &[out.clone()])?;
    }
    Ok(())
}
