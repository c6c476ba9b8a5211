//! The `offload` binary: exit codes, artifacts and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn offload(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offload"))
        .args(args)
        .env_remove("OFFLOAD_PROFILE_PATH")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn repo_file(rel: &str) -> String {
    format!("{}/../../{rel}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn simulate_both_schedules_writes_traces_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = offload(&[
        "simulate",
        "--model",
        "5b",
        "--profile",
        "gh200",
        "--schedule",
        "both",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "trace_5b_ste.csv",
        "trace_5b_stv.csv",
        "plan_5b_ste.toml",
        "plan_5b_stv.toml",
        "summary_5b.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let text = stdout(&o);
    let speedup: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("stv/ste throughput: "))
        .and_then(|x| x.trim_end_matches('x').parse().ok())
        .unwrap();
    assert!(speedup > 1.0, "{text}");
    let summary = std::fs::read_to_string(dir.path().join("summary_5b.csv")).unwrap();
    assert!(summary.starts_with("# offload-trace/1\n"));
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn missing_profile_file_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = offload(&[
        "simulate",
        "--profile",
        "/nonexistent/lab.toml",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/nonexistent/lab.toml"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "model = \"5b\"\nbatch = 8\n").unwrap();
    let o = offload(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));

    let o = offload(&[
        "simulate",
        "--gpu-buckets",
        "100000",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gpu-buckets"));

    let o = offload(&["simulate", "--model", "200b", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("200b"));

    assert_eq!(
        offload(&["simulate", "--no-such-flag"]).status.code(),
        Some(2)
    );
}

#[test]
fn config_file_drives_a_run_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "model = \"13b\"\nbsz = 4\nschedule = \"stv\"\ngpu_buckets = \"auto\"\nout = \"{}\"\n",
            dir.path().join("a").display()
        ),
    )
    .unwrap();
    let o = offload(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        "1b",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("1b"));
    assert!(dir.path().join("a/trace_1b_stv.csv").is_file());
    assert!(!dir.path().join("a/trace_1b_ste.csv").exists());
}

#[test]
fn profiles_are_found_on_the_search_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(
        repo_file("profiles/dgx-a100.toml"),
        dir.path().join("lab.toml"),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_offload"))
        .args([
            "max-model",
            "--profile",
            "lab",
            "--out",
            &out_arg(&dir.path().join("o")),
        ])
        .env(
            "OFFLOAD_PROFILE_PATH",
            format!("/nonexistent:{}", dir.path().display()),
        )
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("lab.toml"));
    assert_eq!(
        offload(&["max-model", "--profile", "lab"]).status.code(),
        Some(2)
    );
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 4] = [
        &["simulate", "--model", "5b", "--seed", "3"],
        &["compare", "--models", "1b,13b,25b"],
        &[
            "scan-seq",
            "--model",
            "13b",
            "--seqs",
            "4096,262144,1048576",
        ],
        &["ablate", "--model", "1b"],
    ];
    for dir in [&a, &b] {
        for args in runs {
            let mut v = args.to_vec();
            let out = out_arg(dir.path());
            v.extend(["--out", &out]);
            assert_eq!(offload(&v).status.code(), Some(0));
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 8, "{names:?}");
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs between runs");
    }
}

#[test]
fn scan_marks_absurd_lengths_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let o = offload(&[
        "scan-seq",
        "--model",
        "13b",
        "--seqs",
        "8192,1000000000000",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scan_13b_k8_ulysses.csv")).unwrap();
    assert!(csv.starts_with("# offload-scan/1\n"));
    let last = csv.lines().last().unwrap();
    assert!(
        last.contains(",1000000000000,false,false,infeasible,"),
        "{last}"
    );
}

#[test]
fn compare_keeps_infeasible_models_as_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = offload(&[
        "compare",
        "--models",
        "5b,20b,50b",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",flow,"));
    assert!(rows[2].contains(",infeasible,"));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let pass = offload(&["verify", "--seeds", "2", "--steps", "40", "--out", &out]);
    assert_eq!(pass.status.code(), Some(0), "{}", stdout(&pass));
    assert!(dir.path().join("verify.txt").is_file());
    assert!(stdout(&pass).contains("12 runs, 0 failed"));

    let fail = offload(&[
        "verify",
        "--seeds",
        "2",
        "--steps",
        "40",
        "--patterns",
        "mixed",
        "--mutate",
        "--out",
        &out,
    ]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(stdout(&fail).contains("MISMATCH at iteration"));

    let empty = offload(&["verify", "--seeds", "1", "--steps", "0", "--out", &out]);
    assert_eq!(empty.status.code(), Some(0));
}
