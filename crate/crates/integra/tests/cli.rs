use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use integra::cli::FitFile;
use integra::manifest::RunManifest;
use integra_core::linalg::Matrix;
use integra_core::panel::{Coefficient, Domestic, EffectsMode, GroupFilter, PanelFit, PanelParams, PsiSpec};
use serde_json::Value;

fn integra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_integra"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("INTEGRA_JOBS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn diagnostics(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .collect()
}

fn simulate(dir: &Path, countries: &str, len: &str, seed: &str) {
    let out = integra(&["simulate", "--benchmark", "--countries", countries, "--len", len, "--seed", seed, "--out-dir", p(dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_chain_links_manifests_by_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let g = tmp.path().join("g");
    let fit = tmp.path().join("fits/openness.json");
    simulate(&d, "4", "90", "7");

    let out = integra(&["estimate-garch", "--in", p(&d), "--out", p(&g), "--restarts", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = integra(&[
        "estimate-panel",
        "--cov",
        p(&g.join("cov.csv")),
        "--returns",
        p(&d.join("returns.csv")),
        "--factor",
        p(&d.join("factor.csv")),
        "--out",
        p(&fit),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let sim = manifest(&d.join("manifest.json"));
    let garch = manifest(&g.join("manifest.json"));
    let panel = manifest(&tmp.path().join("fits/openness.manifest.json"));
    let produced = |m: &RunManifest, name: &str| m.outputs.iter().find(|o| o.path == name).unwrap().sha256.clone();
    let consumed = |m: &RunManifest, name: &str| {
        m.inputs.iter().find(|i| i.path.ends_with(name)).unwrap_or_else(|| panic!("{name} not an input")).sha256.clone()
    };
    assert_eq!(consumed(&garch, "returns.csv"), produced(&sim, "returns.csv"));
    assert_eq!(consumed(&garch, "meta.csv"), produced(&sim, "meta.csv"));
    assert_eq!(consumed(&panel, "cov.csv"), produced(&garch, "cov.csv"));
    assert_eq!(consumed(&panel, "factor.csv"), produced(&sim, "factor.csv"));
    assert_eq!(sim.timestamp, "2023-11-14T22:13:20Z");

    let file: FitFile = serde_json::from_slice(&fs::read(&fit).unwrap()).unwrap();
    assert_eq!(file.factor, "factor");
    assert_eq!(file.fit.n_countries, 4);
    assert_eq!(file.fit.n_obs, 4 * 90);

    let fits: Value = serde_json::from_slice(&fs::read(g.join("garch_fits.json")).unwrap()).unwrap();
    let c01 = &fits["countries"]["C01"];
    for key in ["params", "loglik", "converged", "iterations", "gradient_norm"] {
        assert!(!c01[key].is_null(), "{key}");
    }

    let report = tmp.path().join("table.csv");
    let out = integra(&["report", "--dir", p(&tmp.path().join("fits")), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 2);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = integra(&["estimate-panel", "--cov", "cov.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(err.contains("--returns"), "{err}");

    assert_eq!(integra(&["simulate", "--out-dir", "x"]).status.code(), Some(2));
    assert_eq!(integra(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(integra(&["estimate-panel", "--nw-lag", "soon"]).status.code(), Some(2));
}

#[test]
fn version_flag() {
    let out = integra(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn non_numeric_cell_names_file_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let returns = tmp.path().join("returns.csv");
    fs::write(&returns, "date,series_id,value\n2000-01,world,1.5\n2000-02,world,abc\n").unwrap();
    let out = integra(&["stats", "--returns", p(&returns)]);
    assert_eq!(out.status.code(), Some(1));
    let diags = diagnostics(&out);
    assert_eq!(diags.len(), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let d = &diags[0];
    assert_eq!(d["level"], "error");
    assert_eq!(d["kind"], "parse");
    assert_eq!(d["file"], p(&returns));
    assert_eq!(d["line"], 3);
    assert_eq!(d["column"], 3);
}

#[test]
fn malformed_inputs_never_crash() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("x.csv");
    let cases: [&[u8]; 6] = [
        b"",
        b"date,series_id\n",
        b"date,series_id,value\n2000-13,world,1\n",
        b"date,series_id,value\n2000-01,world\n",
        b"date,series_id,value\n2000-01,world,1\n2000-03,world,2\n",
        b"date,series_id,value\n\xff\xfe,world,1\n",
    ];
    for bytes in cases {
        fs::write(&f, bytes).unwrap();
        let out = integra(&["stats", "--returns", p(&f)]);
        assert_eq!(out.status.code(), Some(1), "{:?}", String::from_utf8_lossy(bytes));
        assert!(!diagnostics(&out).is_empty());
    }
}

#[test]
fn edited_input_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, "2", "70", "1");
    let returns = d.join("returns.csv");
    let mut text = fs::read_to_string(&returns).unwrap();
    text.push_str("2021-01,C01,0.5\n");
    fs::write(&returns, text).unwrap();
    let out = integra(&["estimate-garch", "--in", p(&d), "--out", p(&tmp.path().join("g"))]);
    assert_eq!(out.status.code(), Some(1));
    let diags = diagnostics(&out);
    assert_eq!(diags[0]["kind"], "tamper");
    assert_eq!(diags[0]["file"], p(&returns));
    assert!(!tmp.path().join("g").exists());
}

#[test]
fn simulation_and_estimation_are_byte_identical_across_runs_and_pool_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, "3", "80", "11");
    simulate(&b, "3", "80", "11");
    for f in ["returns.csv", "meta.csv", "factor.csv", "true_cov.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ga = tmp.path().join("ga");
    let gb = tmp.path().join("gb");
    let run = |jobs: &str, out: &PathBuf| {
        let o = integra(&["estimate-garch", "--jobs", jobs, "--in", p(&a), "--out", p(out), "--restarts", "1"]);
        assert_eq!(o.status.code(), Some(0));
    };
    run("1", &ga);
    run("3", &gb);
    for f in ["cov.csv", "garch_fits.json"] {
        assert_eq!(fs::read(ga.join(f)).unwrap(), fs::read(gb.join(f)).unwrap(), "{f}");
    }
}

fn coefficient(name: &str, estimate: f64, se: f64) -> Coefficient {
    Coefficient { name: name.into(), estimate, se: Some(se), tstat: Some(estimate / se) }
}

fn fit_file(factor: &str, group: GroupFilter, kappa_t: f64, identified: bool) -> FitFile {
    let coefficients = vec![
        coefficient("kappa", kappa_t * 0.01, 0.01),
        coefficient("delta_m", 0.05, 0.1),
        coefficient("delta_d_fx", 0.3, 0.1),
        coefficient("delta_e_fx", -0.1, 0.1),
        coefficient("delta_dom", 0.02, 0.01),
    ];
    let fit = PanelFit {
        params: PanelParams { kappa: kappa_t * 0.01, delta_m: 0.05, delta_d_fx: 0.3, delta_e_fx: -0.1, domestic: Domestic::Pooled(0.02) },
        coefficients,
        covariance: Matrix::identity(5),
        ssr: 1.0,
        n_obs: 600,
        n_countries: 5,
        countries: Vec::new(),
        mode: EffectsMode::Pooled,
        group,
        nw_lag: 4,
        psi: PsiSpec::Logistic,
        converged: true,
        identified,
        gradient_norm: 0.0,
        factor_sd: 1.0,
        warnings: Vec::new(),
    };
    FitFile { factor: factor.into(), fit, stars: BTreeMap::new(), caveat: String::new() }
}

fn report_rows(dir: &Path) -> Vec<Vec<String>> {
    let out = integra(&["report", "--dir", p(dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), integra::cli::REPORT_HEADER);
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn report_has_one_row_per_fit_with_stars() {
    let tmp = tempfile::tempdir().unwrap();
    integra::io::write_json(&tmp.path().join("b.json"), &fit_file("openness", GroupFilter::Emerging, 2.0, true)).unwrap();
    integra::io::write_json(&tmp.path().join("a.json"), &fit_file("openness", GroupFilter::All, 2.8, true)).unwrap();
    let rows = report_rows(tmp.path());
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][..3], ["openness", "all", "pooled"]);
    assert_eq!(rows[1][1], "emerging");
    // |t| = 2.8 clears the 1% cut, which the published tables mark with one star.
    assert_eq!(rows[0][3], "0.0280* (0.0100)");
    assert_eq!(rows[1][3], "0.0200** (0.0100)");
    assert_eq!(rows[0][4], "0.0500 (0.1000)");
    assert_eq!(rows[0][5], "0.3000* (0.1000)");
    assert_eq!(rows[0][8], "600");
    assert_eq!(rows[0][9], "5");
    assert_eq!(rows[0][10], "");
}

#[test]
fn unidentified_fit_has_warning_and_no_stars() {
    let tmp = tempfile::tempdir().unwrap();
    integra::io::write_json(&tmp.path().join("flat.json"), &fit_file("flat", GroupFilter::All, 5.0, false)).unwrap();
    let rows = report_rows(tmp.path());
    assert_eq!(rows.len(), 1);
    assert!(rows[0][3..8].iter().all(|c| !c.contains('*')), "{:?}", rows[0]);
    assert!(rows[0][10].contains("unidentified"));
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("fit.manifest.json"), "{}").unwrap();
    let out = integra(&["report", "--dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(diagnostics(&out)[0]["kind"], "empty_directory");
}

#[test]
fn stats_writes_one_row_per_series() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, "2", "60", "2");
    let out_path = tmp.path().join("stats.csv");
    let out = integra(&["stats", "--returns", p(&d.join("returns.csv")), "--meta", p(&d.join("meta.csv")), "--out", p(&out_path)]);
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_path(&out_path).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), integra::cli::STATS_HEADER);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    let c01 = rows.iter().find(|r| &r[0] == "C01").unwrap();
    assert_eq!(&c01[1], "developed");
    assert_eq!(&c01[4], "60");
    assert!(tmp.path().join("stats.manifest.json").is_file());
}

#[test]
fn config_file_round_trips_through_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = integra_core::simulate::DgpConfig::benchmark(2, 64, -0.3, 9);
    let path = tmp.path().join("dgp.json");
    integra::io::write_json(&path, &cfg).unwrap();
    let out = integra(&["simulate", "--config", p(&path), "--out-dir", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let truth: Value = serde_json::from_slice(&fs::read(tmp.path().join("d/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["config"]["seed"], 9);
    assert_eq!(truth["config"]["prices"]["kappa"], -0.3);
    let psi = &truth["psi"];
    assert!(psi["min"].as_f64().unwrap() > 0.0 && psi["max"].as_f64().unwrap() < 1.0);

    fs::write(&path, "{\"seed\": 1,\n \"end\": \"2020-12\",\n oops}").unwrap();
    let out = integra(&["simulate", "--config", p(&path), "--out-dir", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    let d = &diagnostics(&out)[0];
    assert_eq!(d["kind"], "parse");
    assert_eq!(d["line"], 3);
}
