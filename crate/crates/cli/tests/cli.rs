use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use psdtls::io::{format_matrix, parse_matrix, read_matrix, write_matrix};
use psdtls::Matrix;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn psdtls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psdtls"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Value printed after `key` on its own line.
fn field(out: &Output, key: &str) -> String {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(' ').map(str::to_string))
        .unwrap_or_else(|| panic!("no '{key}' in output:\n{}", stdout(out)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn solve_rank_on_exact_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let x_out = dir.path().join("x.txt");
    let trace = dir.path().join("trace.csv");
    let out = psdtls(&[
        "solve-rank",
        "--data",
        p(&fixture("exact_D.txt")),
        "--target",
        p(&fixture("exact_T.txt")),
        "--rank",
        "2",
        "--out",
        p(&x_out),
        "--trace",
        p(&trace),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let e: f64 = field(&out, "E").parse().unwrap();
    assert!(e.abs() <= 1e-8, "E = {e}");
    assert_eq!(field(&out, "converged"), "true");

    let x = read_matrix(&x_out).unwrap();
    let xs = read_matrix(fixture("exact_X.txt")).unwrap();
    assert!((&x - &xs).norm() <= 1e-6 * xs.norm());

    let text = std::fs::read_to_string(&x_out).unwrap();
    assert_eq!(format_matrix(&parse_matrix(&text).unwrap()), text);
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert!(trace.starts_with("iter,E,grad_norm,orth_residual,backend_iters\n"));
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = psdtls(&[
            "solve-rank",
            "--data",
            p(&fixture("exact_D.txt")),
            "--target",
            p(&fixture("exact_T.txt")),
            "--rank",
            "3",
            "--init",
            "random",
            "--seed",
            "7",
            "--backend",
            "cg-o",
            "--out",
            p(&path),
        ]);
        assert_ne!(out.status.code(), Some(2), "{}", stderr(&out));
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.txt"), run("b.txt"));
}

#[test]
fn single_column_sweep_matches_rank_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = Matrix::from_column_slice(5, 1, &[1.0, -2.0, 0.5, 3.0, 1.5]);
    let t = Matrix::from_column_slice(5, 1, &[2.0, -3.0, 1.0, 7.0, 2.5]);
    let (dp, tp) = (dir.path().join("d.txt"), dir.path().join("t.txt"));
    write_matrix(&dp, &d).unwrap();
    write_matrix(&tp, &t).unwrap();
    let (x1, x2) = (dir.path().join("x1.txt"), dir.path().join("x2.txt"));
    let a = psdtls(&[
        "solve-rank",
        "--data",
        p(&dp),
        "--target",
        p(&tp),
        "--rank",
        "1",
        "--out",
        p(&x1),
    ]);
    let b = psdtls(&[
        "psdtls",
        "--data",
        p(&dp),
        "--target",
        p(&tp),
        "--out",
        p(&x2),
    ]);
    assert!(a.status.success() && b.status.success(), "{}", stderr(&b));
    assert_eq!(std::fs::read(x1).unwrap(), std::fs::read(x2).unwrap());
}

#[test]
fn psdtls_report_lists_every_rank() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("ranks.csv");
    let out = psdtls(&[
        "psdtls",
        "--data",
        p(&fixture("exact_D.txt")),
        "--target",
        p(&fixture("exact_T.txt")),
        "--out",
        p(&dir.path().join("x.txt")),
        "--report",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rank,E,status");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("2,"));
    let e: f64 = field(&out, "E").parse().unwrap();
    assert!(e.abs() <= 1e-8);
}

#[test]
fn minrank_and_corr() {
    let out = psdtls(&[
        "minrank",
        "--data",
        p(&fixture("exact_D.txt")),
        "--target",
        p(&fixture("exact_T.txt")),
        "--bound",
        "1e-6",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(field(&out, "satisfied"), "true");
    assert!(field(&out, "rank").parse::<usize>().unwrap() <= 2);

    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("i.txt");
    write_matrix(&ip, &Matrix::identity(3, 3)).unwrap();
    let xp = dir.path().join("x.txt");
    let out = psdtls(&[
        "corr",
        "--c",
        p(&ip),
        "--p",
        p(&ip),
        "--q",
        p(&ip),
        "--out",
        p(&xp),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let std: f64 = field(&out, "Std").parse().unwrap();
    assert!(std.abs() <= 1e-10);
    assert!((read_matrix(&xp).unwrap() - Matrix::identity(3, 3)).norm() <= 1e-10);

    let out = psdtls(&["corr", "--c", p(&ip), "--p", p(&ip), "--out", p(&xp)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn profile_on_hand_records() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("prof");
    let out = psdtls(&[
        "profile",
        "--in",
        p(&fixture("hand_records.csv")),
        "--out-prefix",
        p(&prefix),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let read = |s: &str| -> Vec<(f64, f64)> {
        std::fs::read_to_string(dir.path().join(format!("prof_{s}.dat")))
            .unwrap()
            .lines()
            .map(|l| {
                let mut it = l.split_whitespace().map(|v| v.parse::<f64>().unwrap());
                (it.next().unwrap(), it.next().unwrap())
            })
            .collect()
    };
    assert_eq!(read("s1"), vec![(1.0, 1.0), (2.0, 1.0)]);
    assert_eq!(read("s2"), vec![(1.0, 0.5), (2.0, 1.0)]);
}

#[test]
fn bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: &str| {
        let path = dir.path().join(name);
        let out = psdtls(&[
            "bench",
            "--sizes",
            "8x4,10x3",
            "--trials",
            "2",
            "--seed",
            "11",
            "--solvers",
            "cg-o,gmres-o",
            "--jobs",
            jobs,
            "--out",
            p(&path),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(field(&out, "records"), "8");
        std::fs::read_to_string(path).unwrap()
    };
    let e_column = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| l.split(',').nth(7).unwrap().to_string())
            .collect()
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "2");
    assert!(a.starts_with(
        "problem_id,solver_id,m,n,r,seed,elapsed_seconds,E,orth_residual,converged\n"
    ));
    assert_eq!(e_column(&a), e_column(&b));
}

#[test]
fn malformed_input_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = psdtls(&[
        "solve-rank",
        "--data",
        p(&fixture("malformed.txt")),
        "--target",
        p(&fixture("malformed.txt")),
        "--rank",
        "1",
        "--out",
        p(&dir.path().join("x.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("malformed.txt") && err.contains("line 4"),
        "{err}"
    );
}

#[test]
fn missing_file_reports_path() {
    let out = psdtls(&[
        "psdtls",
        "--data",
        "/nonexistent/D.txt",
        "--target",
        p(&fixture("exact_T.txt")),
        "--out",
        "/tmp/unused.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/D.txt"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(psdtls(&["solve-rank", "--bogus"]).status.code(), Some(2));
    assert_eq!(psdtls(&[]).status.code(), Some(2));
    let out = psdtls(&["bench", "--sizes", "8by4", "--out", "/tmp/unused.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = psdtls(&[
        "solve-rank",
        "--data",
        p(&fixture("exact_D.txt")),
        "--target",
        p(&fixture("exact_T.txt")),
        "--rank",
        "9",
        "--out",
        "/tmp/unused.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = psdtls(&[
        "solve-rank",
        "--data",
        p(&fixture("exact_D.txt")),
        "--target",
        p(&fixture("exact_T.txt")),
        "--rank",
        "2",
        "--max-iter",
        "1",
        "--out",
        p(&dir.path().join("x.txt")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(dir.path().join("x.txt").exists());
}

#[test]
fn help_shows_defaults() {
    let out = psdtls(&["solve-rank", "--help"]);
    let text = stdout(&out);
    for needle in ["[default: gmres-o]", "[default: 1e-10]", "[default: 200]"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
}
