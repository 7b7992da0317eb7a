use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hjdc::field_net::PiecewiseField;
use hjdc::trajectory::TrajectoryBundle;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn hjdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjdc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hjdc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, n_iter: usize) -> String {
    let text = ok(&["presets", "harmonic_2d_small"]);
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["trajectory"]["N"] = json!(64);
    v["trajectory"]["M"] = json!(8);
    v["train"]["n_iter"] = json!(n_iter);
    v["train"]["batch"] = json!(32);
    v["network"]["L"] = json!(3);
    v["network"]["width"] = json!(8);
    v["eval"]["grids"][0]["n"] = json!([10, 10]);
    let path = dir.join("cfg.json");
    fs::write(&path, v.to_string()).unwrap();
    path.display().to_string()
}

fn sha(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn presets_list_and_print() {
    let names = ok(&["presets"]);
    for n in ["harmonic_2d", "caustic_2d_small", "lqc_pendulum", "kepler_small"] {
        assert!(names.lines().any(|l| l == n), "{n} missing");
    }
    let v: Value = serde_json::from_str(&ok(&["presets", "kepler"])).unwrap();
    assert_eq!(v["trajectory"]["T"], json!(9.0));
}

#[test]
fn generate_writes_hjt1_and_honours_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 5);
    let (a, b, c) = (dir.path().join("a.hjt"), dir.path().join("b.hjt"), dir.path().join("c.hjt"));
    let line = ok(&["generate", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "4"]);
    let summary: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(summary["N"], json!(64));
    assert_eq!(summary["M"], json!(8));
    assert_eq!(summary["model_id"], json!("harmonic"));
    ok(&["generate", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "4"]);
    ok(&["generate", "--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..8], b"HJTRAJB1");
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 12 + hlen + 9 * 64 * 4 * 8);
    let bundle = TrajectoryBundle::load(&a).unwrap();
    assert_eq!(bundle.seed, 4);
}

#[test]
fn zero_iterations_keep_the_initial_net_and_write_an_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let traj = dir.path().join("t.hjt");
    let model = dir.path().join("m.json");
    ok(&["generate", "--config", &cfg, "--out", traj.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--traj", traj.to_str().unwrap(), "--out", model.to_str().unwrap()]);
    let loss = fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1, "{loss}");
    let field = PiecewiseField::load(&model).unwrap();
    let net = field.net_at(0.0);
    assert!(net.params_flat().iter().any(|&w| w != 0.0));
    // Biases start at zero under He initialization.
    assert!(net.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
}

#[test]
fn pipeline_outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 30);
    let traj = dir.path().join("t.hjt");
    ok(&["generate", "--config", &cfg, "--out", traj.to_str().unwrap()]);
    let mut sums: Vec<Vec<String>> = Vec::new();
    for threads in ["1", "4"] {
        let sub = dir.path().join(format!("run{threads}"));
        fs::create_dir(&sub).unwrap();
        let model = sub.join("m.json");
        let t = traj.to_str().unwrap();
        ok(&["--threads", threads, "train", "--config", &cfg, "--traj", t, "--out", model.to_str().unwrap()]);
        let m = model.to_str().unwrap();
        ok(&["--threads", threads, "eval", "--config", &cfg, "--model", m, "--traj", t, "--outdir", sub.to_str().unwrap()]);
        let files = ["m.json", "m.loss.csv", "curves.csv", "residual_grid.csv", "error_grid.csv"];
        sums.push(files.iter().map(|f| sha(&sub.join(f))).collect());
    }
    assert_eq!(sums[0], sums[1]);
}

#[test]
fn report_checks_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 10);
    let traj = dir.path().join("t.hjt");
    let model = dir.path().join("m.json");
    let (t, m, o) = (traj.to_str().unwrap(), model.to_str().unwrap(), dir.path().to_str().unwrap());
    ok(&["generate", "--config", &cfg, "--out", t]);
    ok(&["train", "--config", &cfg, "--traj", t, "--out", m]);
    ok(&["eval", "--config", &cfg, "--model", m, "--traj", t, "--outdir", o]);
    let out = ok(&["report", "--outdir", o]);
    assert!(out.lines().any(|l| l.contains("final_loss")), "{out}");
    assert!(out.lines().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")), "{out}");
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"schema\": ,\n}").unwrap();
    let out = hjdc(&["generate", "--config", bad.to_str().unwrap(), "--out", "x.hjt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte offset 14"));

    let out = hjdc(&["generate", "--config", "preset:no_such", "--out", "x.hjt"]);
    assert_eq!(out.status.code(), Some(2));

    let out = hjdc(&["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    let out = hjdc(&["generate", "--config", missing.to_str().unwrap(), "--out", "x.hjt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let cfg = tiny_config(dir.path(), 1);
    let unwritable = dir.path().join("no_dir").join("t.hjt");
    let out = hjdc(&["generate", "--config", &cfg, "--out", unwritable.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let junk = dir.path().join("junk.hjt");
    fs::write(&junk, b"not a trajectory").unwrap();
    let model = dir.path().join("m.json");
    let out = hjdc(&["train", "--config", &cfg, "--traj", junk.to_str().unwrap(), "--out", model.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}
