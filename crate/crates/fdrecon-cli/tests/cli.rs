//! End-to-end checks of the `fdrecon` binary: fixtures are written as CSV,
//! the binary runs as a subprocess, and its files and streams are parsed
//! back.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdrecon"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_csv(path: &Path, rows: &[Vec<Option<f64>>], header: Option<&[f64]>) {
    let mut text = String::new();
    if let Some(points) = header {
        let cells: Vec<String> = points.iter().map(|x| x.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    for row in rows {
        let cells: Vec<String> =
            row.iter().map(|c| c.map(|x| x.to_string()).unwrap_or_default()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn read_csv(path: &Path, skip_header: bool) -> Vec<Vec<Option<f64>>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(skip_header as usize)
        .map(|line| {
            line.split(',')
                .map(|t| if t.is_empty() { None } else { Some(t.parse().unwrap()) })
                .collect()
        })
        .collect()
}

/// Two-factor curves plus a common mean, so the centered data are exactly
/// rank 2 while the raw matrix is rank 3. The last two curves lose their
/// tails (different lengths, hence two distinct patterns).
struct Fixture {
    dir: TempDir,
    target: PathBuf,
    covariate: PathBuf,
    truth: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

const M: usize = 21;
const CURVES: usize = 12;

fn scores(t: usize) -> (f64, f64) {
    ((1.3 * t as f64 + 0.4).sin(), (0.7 * t as f64).cos())
}

fn rank2_fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let mut truth = Vec::new();
    let mut mask = Vec::new();
    let mut target_rows = Vec::new();
    let mut cov_rows = Vec::new();
    for t in 0..CURVES {
        let (a, b) = scores(t);
        let missing_from = match t {
            10 => 15,
            11 => 13,
            _ => M,
        };
        let mut truth_row = Vec::new();
        let mut mask_row = Vec::new();
        let mut target_row = Vec::new();
        let mut cov_row = Vec::new();
        for i in 0..M {
            let u = i as f64 / (M - 1) as f64;
            let y = 0.3 + u + a * (2.0 * PI * u).sin() + b * (2.0 * PI * u).cos();
            let x = -0.1 + a * (2.0 * PI * u).cos() - b * (2.0 * PI * u).sin();
            truth_row.push(y);
            mask_row.push(i < missing_from);
            target_row.push((i < missing_from).then_some(y));
            cov_row.push(Some(x));
        }
        truth.push(truth_row);
        mask.push(mask_row);
        target_rows.push(target_row);
        cov_rows.push(cov_row);
    }
    let target = dir.path().join("target.csv");
    let covariate = dir.path().join("cov.csv");
    write_csv(&target, &target_rows, None);
    write_csv(&covariate, &cov_rows, None);
    Fixture { dir, target, covariate, truth, mask }
}

#[test]
fn reconstruct_recovers_missing_cells_of_a_noiseless_fixture() {
    let fx = rank2_fixture();
    let out = run_in(
        fx.dir.path(),
        &[
            "reconstruct",
            "--target",
            fx.target.to_str().unwrap(),
            "--covariate",
            fx.covariate.to_str().unwrap(),
            "--rank",
            "2",
            "--out",
            "recon.csv",
            "--sidecar",
            "side.json",
        ],
    );
    assert_ok(&out);

    let recon = read_csv(&fx.dir.path().join("recon.csv"), false);
    assert_eq!(recon.len(), CURVES);
    for t in 0..CURVES {
        for i in 0..M {
            let got = recon[t][i].expect("full matrix");
            assert!(
                (got - fx.truth[t][i]).abs() < 1e-9,
                "curve {t} point {i}: {got} vs {}",
                fx.truth[t][i]
            );
        }
    }

    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.dir.path().join("side.json")).unwrap())
            .unwrap();
    assert_eq!(side["rank_source"], "fixed");
    assert_eq!(side["complete_rank"], 2);
    assert_eq!(side["curves"].as_array().unwrap().len(), CURVES);
    assert_eq!(side["patterns"].as_array().unwrap().len(), 2);
}

#[test]
fn keep_observed_splices_the_input_back_verbatim() {
    let fx = rank2_fixture();
    let out = run_in(
        fx.dir.path(),
        &[
            "reconstruct",
            "--target",
            fx.target.to_str().unwrap(),
            "--covariate",
            fx.covariate.to_str().unwrap(),
            "--rank",
            "1",
            "--keep-observed",
            "--out",
            "recon.csv",
        ],
    );
    assert_ok(&out);
    let recon = read_csv(&fx.dir.path().join("recon.csv"), false);
    let input = read_csv(&fx.target, false);
    for t in 0..CURVES {
        for i in 0..M {
            if fx.mask[t][i] {
                // Rank 1 distorts the fit, but observed cells must come back
                // bit for bit.
                assert_eq!(recon[t][i].unwrap().to_bits(), input[t][i].unwrap().to_bits());
            }
        }
    }
}

#[test]
fn cv_rank_prints_the_effective_rank_of_noiseless_data() {
    let fx = rank2_fixture();
    let out = run_in(
        fx.dir.path(),
        &[
            "cv-rank",
            "--target",
            fx.target.to_str().unwrap(),
            "--covariate",
            fx.covariate.to_str().unwrap(),
            "--out",
            "cv.json",
        ],
    );
    assert_ok(&out);
    // Two distinct patterns, one line each; noiseless two-factor data pick
    // rank 2 both times.
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout, "2\n2\n");

    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.dir.path().join("cv.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["report"]["chosen_rank"], 2);
}

#[test]
fn bands_cover_the_truth_and_stay_on_missing_cells() {
    let fx = rank2_fixture();
    let out = run_in(
        fx.dir.path(),
        &[
            "bands",
            "--target",
            fx.target.to_str().unwrap(),
            "--covariate",
            fx.covariate.to_str().unwrap(),
            "--rank",
            "2",
            "--alpha",
            "0.2",
            "--out",
            "center.csv",
            "--lower",
            "lo.csv",
            "--upper",
            "hi.csv",
        ],
    );
    assert_ok(&out);
    let center = read_csv(&fx.dir.path().join("center.csv"), false);
    let lower = read_csv(&fx.dir.path().join("lo.csv"), false);
    let upper = read_csv(&fx.dir.path().join("hi.csv"), false);
    for t in 0..CURVES {
        for i in 0..M {
            if fx.mask[t][i] {
                assert!(lower[t][i].is_none() && upper[t][i].is_none());
            } else {
                let (lo, hi) = (lower[t][i].unwrap(), upper[t][i].unwrap());
                let mid = center[t][i].unwrap();
                assert!(lo < hi, "degenerate band at ({t}, {i})");
                assert!(lo <= mid && mid <= hi, "center escapes its band at ({t}, {i})");
                // Noiseless fixture: the truth sits inside even a narrow band.
                assert!(lo <= fx.truth[t][i] && fx.truth[t][i] <= hi);
            }
        }
    }
}

#[test]
fn grid_headers_round_trip_through_the_outputs() {
    let fx = rank2_fixture();
    let points: Vec<f64> = (0..M).map(|i| i as f64 / (M - 1) as f64).collect();
    let target_rows = read_csv(&fx.target, false);
    let cov_rows = read_csv(&fx.covariate, false);
    let target = fx.dir.path().join("target_h.csv");
    let covariate = fx.dir.path().join("cov_h.csv");
    write_csv(&target, &target_rows, Some(&points));
    write_csv(&covariate, &cov_rows, Some(&points));

    let out = run_in(
        fx.dir.path(),
        &[
            "reconstruct",
            "--target",
            target.to_str().unwrap(),
            "--covariate",
            covariate.to_str().unwrap(),
            "--grid-header",
            "--rank",
            "2",
            "--out",
            "recon_h.csv",
        ],
    );
    assert_ok(&out);
    let text = fs::read_to_string(fx.dir.path().join("recon_h.csv")).unwrap();
    let first = text.lines().next().unwrap();
    let header: Vec<f64> = first.split(',').map(|t| t.parse().unwrap()).collect();
    assert_eq!(header, points);
    assert_eq!(text.lines().count(), CURVES + 1);
}

#[test]
fn explicit_weight_lists_are_accepted_and_validated() {
    let fx = rank2_fixture();
    let base = [
        "reconstruct",
        "--target",
        fx.target.to_str().unwrap(),
        "--covariate",
        fx.covariate.to_str().unwrap(),
        "--rank",
        "2",
        "--out",
        "recon.csv",
    ];

    let mut ok_args = base.to_vec();
    ok_args.extend(["--weights", "1,0.5"]);
    assert_ok(&run_in(fx.dir.path(), &ok_args));

    let mut bad_args = base.to_vec();
    bad_args.extend(["--weights", "1,0.5,2"]);
    let out = run_in(fx.dir.path(), &bad_args);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["code"], "cli.usage");
}

#[test]
fn missing_input_fails_with_machine_readable_json() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &["reconstruct", "--target", "absent.csv", "--rank", "2", "--out", "x.csv"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["code"], "io.file");
    assert!(err["error"]["message"].as_str().unwrap().contains("absent.csv"));
}

#[test]
fn fully_observed_data_demand_an_explicit_rank() {
    let fx = rank2_fixture();
    // Strip the incomplete curves to make every row complete.
    let complete: Vec<Vec<Option<f64>>> = read_csv(&fx.target, false)[..10].to_vec();
    let cov: Vec<Vec<Option<f64>>> = read_csv(&fx.covariate, false)[..10].to_vec();
    let target = fx.dir.path().join("complete.csv");
    let covariate = fx.dir.path().join("complete_cov.csv");
    write_csv(&target, &complete, None);
    write_csv(&covariate, &cov, None);

    let out = run_in(
        fx.dir.path(),
        &[
            "reconstruct",
            "--target",
            target.to_str().unwrap(),
            "--covariate",
            covariate.to_str().unwrap(),
            "--out",
            "recon.csv",
        ],
    );
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["code"], "cli.usage");

    // With an explicit rank the same data denoise fine.
    let out = run_in(
        fx.dir.path(),
        &[
            "reconstruct",
            "--target",
            target.to_str().unwrap(),
            "--covariate",
            covariate.to_str().unwrap(),
            "--rank",
            "2",
            "--out",
            "recon.csv",
        ],
    );
    assert_ok(&out);
}

#[test]
fn simulate_is_deterministic_and_report_reprints_the_same_summary() {
    let dir = TempDir::new().unwrap();
    let args = |out: &'static str, csv: &'static str| {
        vec![
            "simulate",
            "--setting",
            "A",
            "--decay",
            "exp",
            "--sigma",
            "0.1",
            "--tc",
            "30",
            "--runs",
            "2",
            "--covariate",
            "--seed",
            "7",
            "--n-test",
            "5",
            "--n-grid",
            "21",
            "--alpha",
            "0.1",
            "--out",
            out,
            "--csv",
            csv,
        ]
    };
    let first = run_in(dir.path(), &args("a.json", "a.csv"));
    assert_ok(&first);
    let second = run_in(dir.path(), &args("b.json", "b.csv"));
    assert_ok(&second);
    let a = fs::read(dir.path().join("a.json")).unwrap();
    let b = fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical reports");
    assert_eq!(first.stdout, second.stdout);

    let doc: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(doc["config"]["seed"], 7);
    assert_eq!(doc["per_run"].as_array().unwrap().len(), 2);
    assert!(doc["aggregates"]["mae_mean"].as_f64().unwrap() > 0.0);

    let report = run_in(
        dir.path(),
        &["report", "--input", "a.json", "--csv", "flat.csv"],
    );
    assert_ok(&report);
    assert_eq!(report.stdout, first.stdout);
    let flat = fs::read_to_string(dir.path().join("flat.csv")).unwrap();
    let direct = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(flat, direct, "report must re-emit the per-run CSV byte for byte");
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let args = |out: &'static str| {
        vec![
            "simulate", "--setting", "B", "--decay", "poly", "--sigma", "0.2", "--tc", "25",
            "--runs", "2", "--seed", "3", "--n-test", "4", "--n-grid", "21", "--out", out,
        ]
    };
    let free = run_in(dir.path(), &args("free.json"));
    assert_ok(&free);
    let capped = Command::new(env!("CARGO_BIN_EXE_fdrecon"))
        .current_dir(dir.path())
        .env("FDRECON_THREADS", "1")
        .args(args("capped.json"))
        .output()
        .unwrap();
    assert_ok(&capped);
    assert_eq!(
        fs::read(dir.path().join("free.json")).unwrap(),
        fs::read(dir.path().join("capped.json")).unwrap()
    );
}
