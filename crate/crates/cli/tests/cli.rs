//! End-to-end tests of the `ricker` binary: exit codes, file round trips,
//! and byte-level determinism across worker counts.

use std::path::Path;
use std::process::{Command, Output};

fn ricker(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ricker"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn build_toy_table(dir: &Path, workers: &str, name: &str) -> Vec<u8> {
    let path = dir.join(name);
    let out = ricker(
        &[
            "tables",
            "--n",
            "20",
            "--grid",
            "3",
            "--sims",
            "150",
            "--seed",
            "42",
            "--out",
            path.to_str().unwrap(),
            "--workers",
            workers,
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "tables failed: {}", stderr(&out));
    std::fs::read(&path).unwrap()
}

#[test]
fn simulate_writes_replayable_series() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for path in [&a, &b] {
        let out = ricker(
            &[
                "simulate", "--logr", "3.6", "--sigma", "0.3", "--phi", "10", "--n", "100",
                "--seed", "1", "--out",
                path.to_str().unwrap(),
            ],
            &[],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    assert_eq!(bytes_a.iter().filter(|&&c| c == b'\n').count(), 100);
}

#[test]
fn simulate_without_seed_logs_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.txt");
    let out = ricker(
        &[
            "simulate", "--logr", "1.0", "--sigma", "0.0", "--phi", "10", "--n", "20", "--out",
            path.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("seed:"), "stderr: {}", stderr(&out));
}

#[test]
fn validation_failures_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("never.txt");
    let out = ricker(
        &[
            "simulate", "--logr", "3.6", "--sigma", "-1", "--phi", "10", "--n", "100", "--seed",
            "1", "--out",
            path.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(!path.exists(), "no partial output on validation failure");

    let out = ricker(
        &[
            "analyze",
            "--data",
            dir.path().join("missing.txt").to_str().unwrap(),
            "--table",
            dir.path().join("missing.csv").to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
            "--seed",
            "1",
        ],
        &[],
    );
    assert_eq!(code(&out), 2);
    assert!(!path.exists());

    let out = ricker(
        &[
            "calibrate", "--logr", "3.6", "--sigma", "0.3", "--phi", "10", "--alpha", "1.0",
            "--seed", "1",
        ],
        &[],
    );
    assert_eq!(code(&out), 2, "alpha = 1 must be rejected");

    // Unknown flags are caught by the parser with the same code.
    let out = ricker(&["simulate", "--bogus"], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn analyze_report_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    build_toy_table(dir.path(), "2", "table.csv");
    let series = dir.path().join("series.txt");
    let out = ricker(
        &[
            "simulate", "--logr", "3.0", "--sigma", "0.3", "--phi", "8", "--n", "20", "--seed",
            "5", "--out",
            series.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0);

    let report = dir.path().join("report.csv");
    let prefix = dir.path().join("minp");
    let out = ricker(
        &[
            "analyze",
            "--data",
            series.to_str().unwrap(),
            "--table",
            dir.path().join("table.csv").to_str().unwrap(),
            "--alpha",
            "0.9",
            "--sims",
            "150",
            "--seed",
            "11",
            "--out",
            report.to_str().unwrap(),
            "--plotdata",
            prefix.to_str().unwrap(),
            "--maha",
            "both",
        ],
        &[],
    );
    let status = code(&out);
    assert!(
        status == 0 || status == 4,
        "unexpected exit {status}: {}",
        stderr(&out)
    );
    assert!(stdout(&out).contains("best theta"), "{}", stdout(&out));

    let report_text = std::fs::read_to_string(&report).unwrap();
    let rows = report_text.lines().count() - 1;
    assert!(rows > 0);
    for suffix in ["logr", "sigma", "phi"] {
        let path = dir.path().join(format!("minp_{suffix}.csv"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().count() - 1,
            rows,
            "plot file {suffix} row count"
        );
    }
}

#[test]
fn analyze_empty_region_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    build_toy_table(dir.path(), "2", "table.csv");
    let series = dir.path().join("zeros.txt");
    std::fs::write(&series, "0\n".repeat(20)).unwrap();
    let report = dir.path().join("report.csv");
    let out = ricker(
        &[
            "analyze",
            "--data",
            series.to_str().unwrap(),
            "--table",
            dir.path().join("table.csv").to_str().unwrap(),
            "--sims",
            "150",
            "--seed",
            "3",
            "--out",
            report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("empty"), "{}", stdout(&out));
    assert!(report.exists(), "report still written for an empty region");
}

#[test]
fn analyze_length_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    build_toy_table(dir.path(), "2", "table.csv");
    let series = dir.path().join("short.txt");
    std::fs::write(&series, "1\n2\n3\n").unwrap();
    let out = ricker(
        &[
            "analyze",
            "--data",
            series.to_str().unwrap(),
            "--table",
            dir.path().join("table.csv").to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            dir.path().join("r.csv").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn calibrate_prints_both_levels() {
    let out = ricker(
        &[
            "calibrate",
            "--logr",
            "3.0",
            "--sigma",
            "0.3",
            "--phi",
            "8",
            "--alpha",
            "0.9",
            "--outer",
            "500",
            "--inner",
            "100",
            "--n",
            "20",
            "--surrogate-sims",
            "300",
            "--seed",
            "17",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let star: f64 = text
        .lines()
        .find(|l| l.starts_with("alpha_star"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let tilde: f64 = text
        .lines()
        .find(|l| l.starts_with("alpha_tilde"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&star));
    assert!((tilde - (1.8 - star)).abs() < 1e-12);
}

/// Acceptance: table and report files are byte-identical across worker
/// counts 1, 4 and 8 at a fixed seed.
#[test]
fn acceptance_10_determinism_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let tables: Vec<Vec<u8>> = ["1", "4", "8"]
        .iter()
        .enumerate()
        .map(|(i, w)| build_toy_table(dir.path(), w, &format!("table_{i}.csv")))
        .collect();
    assert_eq!(tables[0], tables[1], "tables differ between 1 and 4 workers");
    assert_eq!(tables[0], tables[2], "tables differ between 1 and 8 workers");

    let series = dir.path().join("series.txt");
    let out = ricker(
        &[
            "simulate", "--logr", "3.0", "--sigma", "0.3", "--phi", "8", "--n", "20", "--seed",
            "5", "--out",
            series.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0);

    let reports: Vec<Vec<u8>> = ["1", "4", "8"]
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let report = dir.path().join(format!("report_{i}.csv"));
            let out = ricker(
                &[
                    "analyze",
                    "--data",
                    series.to_str().unwrap(),
                    "--table",
                    dir.path().join("table_0.csv").to_str().unwrap(),
                    "--sims",
                    "150",
                    "--seed",
                    "11",
                    "--out",
                    report.to_str().unwrap(),
                    "--maha",
                    "both",
                    "--workers",
                    w,
                ],
                &[],
            );
            let status = code(&out);
            assert!(status == 0 || status == 4, "{}", stderr(&out));
            std::fs::read(&report).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1], "reports differ between 1 and 4 workers");
    assert_eq!(reports[0], reports[2], "reports differ between 1 and 8 workers");
    println!("ACCEPTANCE 10: table and report files byte-identical across 1/4/8 workers");
}

#[test]
fn workers_env_override_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let by_flag = build_toy_table(dir.path(), "2", "flag.csv");
    let path = dir.path().join("env.csv");
    let out = ricker(
        &[
            "tables", "--n", "20", "--grid", "3", "--sims", "150", "--seed", "42", "--out",
            path.to_str().unwrap(),
        ],
        &[("RICKER_WORKERS", "3")],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(by_flag, std::fs::read(&path).unwrap());

    let out = ricker(
        &[
            "tables", "--n", "20", "--grid", "3", "--sims", "150", "--seed", "42", "--out",
            path.to_str().unwrap(),
        ],
        &[("RICKER_WORKERS", "zero")],
    );
    assert_eq!(code(&out), 2, "invalid RICKER_WORKERS must be rejected");
}
