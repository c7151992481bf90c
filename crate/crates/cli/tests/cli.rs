//! End-to-end tests of the `ssmctl` binary: pipeline staging, artifact
//! hashing, determinism, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssmctl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssmctl"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = ssmctl().args(args).output().expect("spawn ssmctl");
    assert!(
        out.status.success(),
        "ssmctl {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = ssmctl().args(args).output().expect("spawn ssmctl");
    (
        out.status.code().unwrap_or(-1),
        format!(
            "{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn demo_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ssmctl-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Shorten the demo horizon so CLI tests stay fast; the full [0, 100]
/// benchmark runs in the acceptance suite.
fn write_short_config(dir: &Path) -> PathBuf {
    let cfg_path = dir.join("chain_config.json");
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["horizon"] = serde_json::json!({"t0": 0.0, "t1": 12.0, "boundaries": [4.0]});
    v["grids"] = serde_json::json!({"design_step": 0.02, "output_step": 0.1});
    // sub-period smoke horizon: the RMS quality criterion belongs to the
    // full benchmark config, not here
    v["max_rms_prediction_error"] = serde_json::Value::Null;
    let short = dir.join("short_config.json");
    std::fs::write(&short, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    short
}

fn run_pipeline(dir: &Path) -> PathBuf {
    run_ok(&["chain-demo", "--out", dir.to_str().unwrap()]);
    let cfg = write_short_config(dir);
    let cfg_s = cfg.to_str().unwrap();
    let out_s = dir.to_str().unwrap();
    run_ok(&["eig", "--config", cfg_s, "--out", out_s]);
    run_ok(&["ssm", "--config", cfg_s, "--out", out_s]);
    run_ok(&["select", "--config", cfg_s, "--out", out_s]);
    run_ok(&["control", "--config", cfg_s, "--out", out_s]);
    cfg
}

#[test]
fn chain_demo_pipeline_produces_expected_artifacts() {
    let dir = demo_dir("pipeline");
    let cfg = run_pipeline(&dir);

    for name in [
        "chain_model.json",
        "spectrum.csv",
        "ssm.json",
        "ranking.csv",
        "selection.json",
        "u.csv",
        "response.csv",
        "summary.json",
    ] {
        assert!(dir.join(name).exists(), "missing artifact {name}");
    }

    // spectrum: first data row is the slowest pair, -0.0041 +- 0.2846i
    let spectrum = std::fs::read_to_string(dir.join("spectrum.csv")).unwrap();
    let first = spectrum.lines().nth(1).unwrap();
    let fields: Vec<f64> = first
        .split(',')
        .skip(1)
        .take(2)
        .map(|s| s.parse().unwrap())
        .collect();
    assert!((fields[0] - (-0.0041)).abs() < 5e-4, "Re = {}", fields[0]);
    assert!((fields[1].abs() - 0.2846).abs() < 5e-4, "Im = {}", fields[1]);

    // selection: five pairs with the reported significance sums
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("selection.json")).unwrap())
            .unwrap();
    assert_eq!(sel["selected"], serde_json::json!([1, 2, 3, 4, 5]));
    let dc = sel["dcgain_sum_selected"].as_f64().unwrap();
    let mh = sel["mhsv_sum_selected"].as_f64().unwrap();
    assert!((dc - 0.907).abs() < 5e-3);
    assert!((mh - 0.978).abs() < 5e-3);

    // summary sanity: validated run with a final-segment RMS under the limit
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["validated"], serde_json::json!(true));
    assert_eq!(summary["rms_per_segment"].as_array().unwrap().len(), 2);

    // validate subcommand replays u.csv through the full model
    run_ok(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(dir.join("response_validated.csv").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let d1 = demo_dir("det1");
    let d2 = demo_dir("det2");
    run_pipeline(&d1);
    run_pipeline(&d2);
    for name in [
        "spectrum.csv",
        "ssm.json",
        "ranking.csv",
        "selection.json",
        "u.csv",
        "response.csv",
    ] {
        let a = std::fs::read(d1.join(name)).unwrap();
        let b = std::fs::read(d2.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }
    // rerun with cached artifacts: coefficients unchanged
    let cfg = d1.join("short_config.json");
    let before = std::fs::read(d1.join("ssm.json")).unwrap();
    run_ok(&[
        "ssm",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d1.to_str().unwrap(),
    ]);
    let after = std::fs::read(d1.join("ssm.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn control_refuses_missing_or_stale_artifacts() {
    let dir = demo_dir("staging");
    run_ok(&["chain-demo", "--out", dir.to_str().unwrap()]);
    let cfg = write_short_config(&dir);
    let cfg_s = cfg.to_str().unwrap();
    let out_s = dir.to_str().unwrap();

    // no ssm artifact yet
    let (code, msg) = run_code(&["control", "--config", cfg_s, "--out", out_s]);
    assert_eq!(code, 2, "expected config-error exit, got {code}: {msg}");
    assert!(msg.contains("missing SSM artifact"), "{msg}");

    run_ok(&["ssm", "--config", cfg_s, "--out", out_s]);
    run_ok(&["select", "--config", cfg_s, "--out", out_s]);

    // stale hash: touch the model file content
    let model = dir.join("chain_model.json");
    let mut text = std::fs::read_to_string(&model).unwrap();
    text.push('\n');
    std::fs::write(&model, text).unwrap();
    let (code, msg) = run_code(&["control", "--config", cfg_s, "--out", out_s]);
    assert_eq!(code, 2, "{msg}");
    assert!(msg.contains("stale"), "{msg}");

    // --fresh recomputes everything against the current model file
    run_ok(&["control", "--config", cfg_s, "--out", out_s, "--fresh"]);
}

#[test]
fn malformed_config_exits_with_config_error() {
    let dir = demo_dir("badcfg");
    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, "{\"model_path\": \"x.json\"}").unwrap();
    let (code, msg) = run_code(&[
        "eig",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{msg}");
}

#[test]
fn threshold_sweep_grows_selection_monotonically() {
    let dir = demo_dir("sweep");
    run_ok(&["chain-demo", "--out", dir.to_str().unwrap()]);
    let cfg = write_short_config(&dir);
    let cfg_s = cfg.to_str().unwrap();
    let out_s = dir.to_str().unwrap();
    let mut last_len = 0usize;
    for threshold in ["0.3", "0.6", "0.9", "0.99"] {
        run_ok(&[
            "select",
            "--config",
            cfg_s,
            "--out",
            out_s,
            "--threshold",
            threshold,
            "--fresh",
        ]);
        let sel: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("selection.json")).unwrap())
                .unwrap();
        let len = sel["selected"].as_array().unwrap().len();
        assert!(
            len >= last_len,
            "selection shrank from {last_len} to {len} at threshold {threshold}"
        );
        last_len = len;
    }
}

#[test]
fn zero_weight_run_emits_zero_control() {
    // Q = 0, M = 0, no forcing in the model: no incentive to act.
    let dir = demo_dir("zeroq");
    run_ok(&["chain-demo", "--out", dir.to_str().unwrap()]);

    // strip the forcing from the model
    let model_path = dir.join("chain_model.json");
    let mut model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    model["forcing"] = serde_json::json!({"channels": []});
    std::fs::write(&model_path, serde_json::to_string_pretty(&model).unwrap()).unwrap();

    let cfg_path = write_short_config(&dir);
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["weights"]["Q"] = serde_json::json!({"displacement_scale": 0.0, "velocity_scale": 0.0});
    cfg["max_rms_prediction_error"] = serde_json::Value::Null;
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let cfg_s = cfg_path.to_str().unwrap();
    let out_s = dir.to_str().unwrap();
    run_ok(&["control", "--config", cfg_s, "--out", out_s, "--fresh"]);

    let u = std::fs::read_to_string(dir.join("u.csv")).unwrap();
    for line in u.lines().skip(1) {
        for field in line.split(',').skip(1) {
            let v: f64 = field.parse().unwrap();
            assert!(v.abs() < 1e-12, "nonzero control {v}");
        }
    }
}

#[test]
fn golden_file_regression() {
    // Byte-for-byte regression against a verified run of the short chain
    // benchmark (single segment, design-only).
    let dir = demo_dir("golden");
    run_ok(&["chain-demo", "--out", dir.to_str().unwrap()]);
    let cfg_path = dir.join("golden_config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("chain_config.json")).unwrap(),
    )
    .unwrap();
    cfg["horizon"] = serde_json::json!({"t0": 0.0, "t1": 5.0, "boundaries": []});
    cfg["grids"] = serde_json::json!({"design_step": 0.05, "output_step": 0.25});
    cfg["max_rms_prediction_error"] = serde_json::Value::Null;
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let cfg_s = cfg_path.to_str().unwrap();
    let out_s = dir.to_str().unwrap();
    run_ok(&["control", "--config", cfg_s, "--out", out_s, "--fresh", "--no-validate"]);

    let got = std::fs::read_to_string(dir.join("u.csv")).unwrap();
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/chain_short_u.csv");
    let want = std::fs::read_to_string(&golden_path).unwrap();
    assert_eq!(
        got, want,
        "u.csv deviates from the stored verified run {}",
        golden_path.display()
    );
}
