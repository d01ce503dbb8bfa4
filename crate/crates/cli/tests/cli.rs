//! End-to-end tests against the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zvonkin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zvonkin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Minimal scenario: zero drift, identity diffusion, no checks selected.
fn minimal_toml(out: &Path) -> String {
    format!(
        r#"
name = "minimal"
output_dir = "{out}"
export_paths = true

[params]
p1 = 2.0
delta = 0.5

[coefficient]
preset = "zero"
dim = 1

[grid]
points_per_axis = 32
half_width_length = 4.0

[resolvent]
c1 = 1.0
c2 = 0.5

[truncation]
radius_length = 1.0

[sim]
t_final_time = 0.25
dt_time = 0.0625
n_paths = 8
seed = 3
start = [0.0]
"#,
        out = out.display()
    )
}

#[test]
fn list_presets_is_stable_and_machine_readable() {
    let first = zvonkin(&["list-presets"]);
    let second = zvonkin(&["list-presets"]);
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.lines().any(|l| l.split('\t').nth(1) == Some("ou")));
    assert!(text
        .lines()
        .any(|l| l.split('\t').nth(1) == Some("krylov_check")));
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 3, "not tab-separated: {line}");
    }
}

#[test]
fn validate_accepts_good_and_names_bad_fields() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, minimal_toml(&dir.path().join("out"))).unwrap();
    let ok = zvonkin(&["validate", good.to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    // Validation must not run anything.
    assert!(!dir.path().join("out").exists());

    // Drift integrability below the dimension.
    let bad = dir.path().join("bad_p1.toml");
    fs::write(
        &bad,
        minimal_toml(&dir.path().join("out")).replace("p1 = 2.0", "p1 = 1.0"),
    )
    .unwrap();
    let err = zvonkin(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&err), 2);
    let msg = String::from_utf8_lossy(&err.stderr).to_string();
    assert!(msg.contains("p1 must exceed d"), "bad diagnostic: {msg}");

    // Unknown key, named in the diagnostic.
    let bad = dir.path().join("bad_key.toml");
    fs::write(
        &bad,
        minimal_toml(&dir.path().join("out")).replace("seed = 3", "seed = 3\nseedd = 4"),
    )
    .unwrap();
    let err = zvonkin(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&err), 2);
    let msg = String::from_utf8_lossy(&err.stderr).to_string();
    assert!(msg.contains("seedd"), "bad diagnostic: {msg}");

    // Missing file.
    let err = zvonkin(&["validate", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&err), 2);
}

#[test]
fn minimal_run_passes_and_reproduces_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    fs::write(&cfg, minimal_toml(&out_a)).unwrap();

    let run_a = zvonkin(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&run_a), 0, "{}", String::from_utf8_lossy(&run_a.stderr));
    for file in ["reports.csv", "summary.txt", "scenario.txt", "paths.csv"] {
        assert!(out_a.join(file).exists(), "{file} missing");
    }

    // Same config, fresh output directory via the override flag.
    let run_b = zvonkin(&["run", cfg.to_str().unwrap(), "--out", out_b.to_str().unwrap()]);
    assert_eq!(code(&run_b), 0, "{}", String::from_utf8_lossy(&run_b.stderr));
    for file in ["reports.csv", "summary.txt", "paths.csv"] {
        assert_eq!(
            fs::read(out_a.join(file)).unwrap(),
            fs::read(out_b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }

    // A different seed must change the sampled paths.
    let out_c = dir.path().join("c");
    let run_c = zvonkin(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(code(&run_c), 0, "{}", String::from_utf8_lossy(&run_c.stderr));
    assert_ne!(
        fs::read(out_a.join("paths.csv")).unwrap(),
        fs::read(out_c.join("paths.csv")).unwrap(),
        "seed override had no effect"
    );

    // Thread cap changes nothing but the schedule.
    let out_d = dir.path().join("d");
    let run_d = zvonkin(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out_d.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(code(&run_d), 0, "{}", String::from_utf8_lossy(&run_d.stderr));
    assert_eq!(
        fs::read(out_a.join("paths.csv")).unwrap(),
        fs::read(out_d.join("paths.csv")).unwrap(),
        "thread count changed the samples"
    );
}

#[test]
fn failing_check_exits_one_with_a_fail_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    let out = dir.path().join("out");
    // A two-point envelope with a deliberately impossible constant.
    let text = format!(
        "{}\n[[estimators]]\nkind = \"two_point_check\"\nsecond_start = [0.5]\nalpha = 1.0\nc_tilde = 1e-6\n",
        minimal_toml(&out)
    );
    fs::write(&cfg, text).unwrap();
    let run = zvonkin(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&run), 1, "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout).to_string();
    assert!(stdout.contains("[FAIL] two_point_check"), "{stdout}");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("1 of 1 checks FAILED"), "{summary}");
}

#[test]
fn run_rejects_bad_config_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    let out = dir.path().join("out");
    fs::write(&cfg, minimal_toml(&out).replace("p1 = 2.0", "p1 = 1.0")).unwrap();
    let run = zvonkin(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    let msg = String::from_utf8_lossy(&run.stderr).to_string();
    assert!(msg.contains("p1 must exceed d"), "bad diagnostic: {msg}");
    // Nothing ran, nothing written.
    assert!(!out.exists());
}
