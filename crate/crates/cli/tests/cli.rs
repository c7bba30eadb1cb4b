use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tlsecho(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlsecho"))
        .args(args)
        .env_remove("TLSECHO_CONFIG_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn header_hash(csv: &str) -> String {
    let line = csv.lines().find(|l| l.starts_with("# tlsecho")).expect("hash header");
    line.rsplit("sha256:").next().unwrap().to_string()
}

#[test]
fn levels_at_clock_field() {
    let o = tlsecho(&["levels", "--iz=-1.5", "--bz-mt=38.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("-3/2,")).expect("-3/2 row");
    let de: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!((de - 27.8).abs() < 1e-3, "{row}");
}

#[test]
fn empty_trace_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty_trace.csv");
    fs::write(&path, "t_s,intensity,sigma\n").unwrap();
    let o = tlsecho(&["fit-trace", "--trace", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty_trace.csv"), "{}", stderr(&o));
}

#[test]
fn malformed_trace_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "t_s,intensity,sigma\n1e-6,0.9,0.01\n2e-6,x,0.01\n").unwrap();
    let o = tlsecho(&["fit-trace", "--trace", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("line 3") && e.contains("column"), "{e}");
}

#[test]
fn unknown_flag_is_validation_error() {
    let o = tlsecho(&["rates", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_value_names_field() {
    let o = tlsecho(&["rates", "--x", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("x"), "{}", stderr(&o));
}

#[test]
fn flat_trace_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut text = String::from("t_s,intensity,sigma\n");
    for k in 1..=40 {
        text.push_str(&format!("{:e},1.0,0.01\n", k as f64 * 1e-7));
    }
    fs::write(&path, text).unwrap();
    let o = tlsecho(&["fit-trace", "--trace", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_from_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let text = tlsecho::config::DEFAULT_TOML.replace("g_par = 17.40", "g_par = 20.0");
    fs::write(dir.path().join("tlsecho.toml"), text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tlsecho"))
        .args(["levels", "--iz=-1.5", "--bz-mt=38.25"])
        .env("TLSECHO_CONFIG_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("-3/2,")).unwrap();
    let clock: f64 = row.split(',').nth(6).unwrap().parse().unwrap();
    assert!((clock - 38.249 * 17.40 / 20.0).abs() < 0.01, "{row}");
}

#[test]
fn invalid_config_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    fs::write(&path, tlsecho::config::DEFAULT_TOML.replace("g_par = 17.40", "g_par = -1.0")).unwrap();
    let o = tlsecho(&["levels", "--bz-mt=38", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.toml"), "{}", stderr(&o));
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out-dir", dir.to_str().unwrap()]);
    let o = tlsecho(&all);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

#[test]
fn mc_validate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_in(a.path(), &["mc-validate", "--suite=kernels", "--seed=42"]);
    run_in(b.path(), &["mc-validate", "--suite=kernels", "--seed=42"]);
    let ja = fs::read_to_string(a.path().join("validation.json")).unwrap();
    let jb = fs::read_to_string(b.path().join("validation.json")).unwrap();
    assert_eq!(ja, jb);
    let v: serde_json::Value = serde_json::from_str(&ja).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);
    let curve = fs::read_to_string(a.path().join("curves/mc_gamma6_n1.csv")).unwrap();
    assert_eq!(header_hash(&curve), v["manifest_sha256"].as_str().unwrap());
    assert!(a.path().join("manifest.json").exists());
}

#[test]
fn echo_then_fit_trace() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["echo", "--no-mims", "--t-max-us", "5", "--per-decade", "24", "--noise", "0.01", "--seed", "3"],
    );
    let trace = dir.path().join("echo.csv");
    let fit_dir = dir.path().join("fit");
    run_in(&fit_dir, &["fit-trace", "--trace", trace.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit_dir.join("fit.json")).unwrap()).unwrap();
    let t_char = v["stretched"]["t_char"].as_f64().unwrap();
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("echo.json")).unwrap()).unwrap();
    let t_1e = echo["t_1e_s"].as_f64().unwrap();
    assert!((t_char / t_1e - 1.0).abs() < 0.2, "{t_char} vs {t_1e}");
}

#[test]
fn manifest_rerun_reproduces_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_in(a.path(), &["rates", "--x", "1e-4", "--c1", "0.41"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    let argv: Vec<String> = m["argv"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect();
    // Replay the recorded argv into a fresh directory.
    let mut replay: Vec<String> = Vec::new();
    let mut skip = false;
    for s in &argv[1..] {
        if skip {
            skip = false;
            continue;
        }
        if s == "--out-dir" {
            skip = true;
            continue;
        }
        replay.push(s.clone());
    }
    let refs: Vec<&str> = replay.iter().map(String::as_str).collect();
    run_in(b.path(), &refs);
    assert_eq!(
        fs::read(a.path().join("rates.csv")).unwrap(),
        fs::read(b.path().join("rates.csv")).unwrap()
    );
}

#[test]
fn small_global_fit_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, x, t) in [("hi", "1e-3", "3"), ("lo", "1e-4", "30")] {
        let d = dir.path().join(name);
        run_in(
            &d,
            &["echo", "--no-mims", "--x", x, "--t-max-us", t, "--t-min-us", "0.05", "--per-decade", "20"],
        );
    }
    let list = serde_json::json!({
        "traces": [
            {"path": "hi/echo.csv", "regime": "single", "fraction": 1e-3},
            {"path": "lo/echo.csv", "regime": "single", "fraction": 1e-4}
        ]
    });
    let list_path = dir.path().join("traces.json");
    fs::write(&list_path, list.to_string()).unwrap();
    let out = dir.path().join("out");
    run_in(
        &out,
        &[
            "fit", "--traces", list_path.to_str().unwrap(), "--c1-steps", "2", "--c2-steps", "2", "--no-refine",
        ],
    );
    for f in ["fit_state.json", "residual_surface.csv", "rate_table.csv", "manifest.json", "curves/00_echo.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn help_lists_units() {
    let o = tlsecho(&["echo", "--help"]);
    let h = stdout(&o);
    for flag in ["--bz-mt", "--t-max-us", "--probe-offset-mhz", "--w-delta-mhz"] {
        assert!(h.contains(flag), "{flag}");
    }
}
