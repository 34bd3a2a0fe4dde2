use std::process::{Command, Output};

use effconf_cli::report::{read_rows, CheckRow, Format, MAddsRow, TrainRow};

fn effconf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effconf")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn profile_matches_library_and_is_deterministic() {
    let out = effconf(&["profile", "--preset", "effconf-ctc-s", "--frames", "1000,2000"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<MAddsRow> = read_rows(out.stdout.as_slice(), Format::Csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].frames, 1000);
    assert!((rows[0].total_madds as f64 / 3.51e9 - 1.0).abs() < 0.02);
    assert_eq!(effconf(&["profile", "--preset", "effconf-ctc-s", "--frames", "1000,2000"]).stdout, out.stdout);
}

#[test]
fn profile_overrides_and_compare() {
    let out = effconf(&[
        "profile", "--preset", "effconf-ctc-s", "--group-sizes", "1,1,1", "--compare", "conformer-ctc-s",
        "--format", "json",
    ]);
    assert_eq!(code(&out), 0);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["config"], "effconf-ctc-s[g=1,1,1]");
    assert_eq!(rows[1]["config"], "conformer-ctc-s");
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
}

#[test]
fn profile_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.toml");
    std::fs::write(&path, "base = \"effconf-ctc-s\"\n[stages.1]\natt_group_size = 1\n").unwrap();
    let csv = dir.path().join("out.csv");
    let out = effconf(&[
        "profile", "--config", path.to_str().unwrap(), "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    let rows: Vec<MAddsRow> = read_rows(std::fs::File::open(&csv).unwrap(), Format::Csv).unwrap();
    assert_eq!(rows[0].config, "wide");
    assert!((rows[0].total_madds as f64 / 3.91e9 - 1.0).abs() < 0.02);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "base = \"effconf-ctc-s\"\ndropuot = 0.1\n").unwrap();
    let typo = typo.to_str().unwrap();
    let cases: &[&[&str]] = &[
        &[],
        &["profile"],
        &["profile", "--preset", "effconf-ctc-s", "--config", typo],
        &["profile", "--preset", "nope"],
        &["profile", "--config", typo],
        &["profile", "--preset", "effconf-ctc-s", "--group-sizes", "3,1"],
        &["profile", "--preset", "effconf-ctc-s", "--frames", "0"],
        &["profile", "--preset", "effconf-ctc-s", "--frames", "ten"],
        &["profile", "--preset", "effconf-ctc-s", "--format", "xml"],
        &["train-toy", "--vocab", "0"],
        &["frobnicate"],
    ];
    for args in cases {
        let out = effconf(args);
        assert_eq!(code(&out), 2, "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn equiv_passes() {
    let out = effconf(&["equiv", "--seed", "3", "--format", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<CheckRow> = read_rows(out.stdout.as_slice(), Format::Json).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.pass));
}

#[test]
fn train_toy_short_run() {
    let args = ["train-toy", "--steps", "2", "--seed", "5", "--no-early-stop"];
    let out = effconf(&args);
    // Two steps cannot reach the default target.
    assert_eq!(code(&out), 1);
    let rows: Vec<TrainRow> = read_rows(out.stdout.as_slice(), Format::Csv).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 2]);
    assert_eq!(rows[0].loss, None);
    assert!(rows[1].loss.is_some_and(f64::is_finite));
    assert_eq!(effconf(&args).stdout, out.stdout);
    let zero = effconf(&["train-toy", "--steps", "0"]);
    assert_eq!(code(&zero), 0);
}
