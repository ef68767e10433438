mod common;

use std::process::Command;

use tensorize::cli::{run_cli, CliError};

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("tensorize").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn fx(name: &str) -> String {
    common::fixture_path(name).display().to_string()
}

fn first_error_line(err: &str) -> &str {
    let line = err.lines().next().unwrap_or("");
    let mut parts = line.splitn(3, ": ");
    assert_eq!(parts.next(), Some("error"), "{err}");
    let code = parts.next().unwrap_or("");
    assert!(!code.is_empty() && code.chars().all(|c| c.is_ascii_lowercase()), "{err}");
    assert!(parts.next().is_some_and(|d| !d.is_empty()), "{err}");
    code
}

#[test]
fn verify_tree_fixture_with_random_rows() {
    let (code, out, err) = cli(&[
        "verify",
        "--model",
        &fx("tree_a.json"),
        "--random",
        "1000",
        "--passes",
        "re,dr,sor",
        "--profile",
        "cpu-avx2",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("max_abs: 0e0\n"), "{out}");
    assert!(out.contains("result: PASS"), "{out}");
    assert!(out.contains("1000 random (seed 0) + 3 boundary"), "{out}");
}

#[test]
fn verify_every_fixture() {
    for (name, _) in common::fixtures() {
        for profile in ["cpu-avx2", "plain"] {
            let (code, out, err) = cli(&["verify", "--model", &fx(&name), "--random", "200", "--profile", profile]);
            assert_eq!(code, 0, "{name}: {out}{err}");
        }
    }
}

#[test]
fn run_on_empty_csv_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.csv");
    std::fs::write(&input, "").unwrap();
    let output = dir.path().join("out.csv");
    let (code, _, err) = cli(&[
        "run",
        "--model",
        &fx("tree_a.json"),
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read_to_string(&output).unwrap(), "");
}

#[test]
fn run_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.csv");
    // Rows reach leaves L0, L1, L2, L3 of tree A; the first sits on the root threshold.
    std::fs::write(&input, "0.5,0,0,0\n1,0,-2,0\n1,0,0,2\n1,0,0,2.5\n").unwrap();
    let (code, out, err) = cli(&["run", "--model", &fx("tree_a.json"), "--input", input.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out, "0\n1\n1\n2\n");
}

#[test]
fn compile_dump_passes_reports_softmax_elimination() {
    let (code, out, _) = cli(&["compile", "--model", &fx("logistic.json"), "--dump-passes"]);
    assert_eq!(code, 0);
    let re = out.lines().find(|l| l.starts_with("re:")).unwrap();
    assert!(re.contains("eliminated=1"), "{re}");
}

#[test]
fn dump_ecg_shows_both_graphs() {
    let (code, out, _) = cli(&["dump-ecg", "--model", &fx("tree_a.json")]);
    assert_eq!(code, 0);
    assert!(out.starts_with("# before (5 nodes)\n"), "{out}");
    assert!(out.contains("# after re,dr,sor (6 nodes)\n"), "{out}");
}

#[test]
fn failures_exit_two_with_a_coded_first_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad_model = dir.path().join("bad.json");
    std::fs::write(&bad_model, r#"{"format_version":1,"model_type":"binarizer","n_features":0,"threshold":0}"#)
        .unwrap();
    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "1,2,3\n").unwrap();
    let bad = bad_model.to_str().unwrap();
    let csv = bad_csv.to_str().unwrap();
    let tree = fx("tree_a.json");
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec![], "usage"),
        (vec!["frobnicate"], "usage"),
        (vec!["compile"], "usage"),
        (vec!["compile", "--model", &tree, "--passes", "re,xx"], "usage"),
        (vec!["verify", "--model", &tree, "--random", "5", "--input", csv], "usage"),
        (vec!["compile", "--model", "/nonexistent/model.json"], "io"),
        (vec!["compile", "--model", bad], "model"),
        (vec!["compile", "--model", &tree, "--profile", "gpu-9000"], "profile"),
        (vec!["run", "--model", &tree, "--input", csv], "csv"),
    ];
    for (args, want) in cases {
        let (code, _, err) = cli(&args);
        assert_eq!(code, 2, "{args:?}: {err}");
        assert_eq!(first_error_line(&err), want, "{args:?}: {err}");
    }
    let (_, _, err) = cli(&["compile", "--model", bad]);
    assert!(err.contains("$.n_features"), "{err}");
}

#[test]
fn divergence_maps_to_exit_one() {
    let e = CliError::Diverged { mismatches: 1, compared: 2, max_abs: 1.0, max_rel: 1.0 };
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().starts_with("diverged: "));
}

#[test]
fn profile_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.json");
    std::fs::write(&p, r#"{"name":"edge","preferred_int_dtype":"int16","sparse_threshold":0.5}"#).unwrap();
    let (code, out, err) = cli(&["compile", "--model", &fx("tree_a.json"), "--profile", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("matmul<int16, dense, acc int32>"), "{out}");
}

#[test]
fn binary_output_is_byte_identical_across_runs() {
    let exe = env!("CARGO_BIN_EXE_tensorize");
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.csv");
    std::fs::write(&input, "1,2,3\n-4,0.5,9\n0,0,0\n").unwrap();
    let runs: Vec<_> = (0..3)
        .map(|_| {
            let c = Command::new(exe).args(["compile", "--model", &fx("rf.json"), "--dump-passes"]).output().unwrap();
            let r = Command::new(exe)
                .args(["run", "--model", &fx("rf.json"), "--input", input.to_str().unwrap()])
                .output()
                .unwrap();
            assert!(c.status.success() && r.status.success());
            (c.stdout, r.stdout)
        })
        .collect();
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
    let bad = Command::new(exe).args(["run"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error: usage: "));
}
