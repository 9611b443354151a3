use std::path::Path;
use std::process::{Command, Output};

fn mdae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mdae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth", "--out-dir", s(dir), "--seed", seed, "--techniques", "LRK,HRK", "--skills", "0,1",
        "--per-cell", "2", "--frames", "24", "--log-level", "warn",
    ]);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_reproducible_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "7");
    synth(&b, "7");
    synth(&c, "8");
    let ta = tree(&a);
    assert_eq!(ta.len(), 2 * 2 * 2 + 2);
    assert_eq!(ta, tree(&b));
    assert_ne!(ta, tree(&c));
}

#[test]
fn features_then_coords_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");
    let feats = tmp.path().join("feats");
    ok(&[
        "features", "--manifest", s(&data.join("manifest.json")), "--chain", s(&data.join("chain.json")),
        "--out-dir", s(&feats),
    ]);
    let back = tmp.path().join("back");
    let out = ok(&[
        "coords", "--manifest", s(&feats.join("manifest.json")), "--out-dir", s(&back), "--reference",
        s(&data.join("manifest.json")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["sequences"], 8);
    assert!(report["max_error"].as_f64().unwrap() < 1e-6, "{report}");
}

#[test]
fn anatomy_report_is_json() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "1");
    let out = ok(&[
        "check-anatomy", "--manifest", s(&tmp.path().join("manifest.json")), "--chain",
        s(&tmp.path().join("chain.json")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["mean_round_trip_error"].as_f64().unwrap() < 1e-6, "{report}");
}

#[test]
fn render_writes_csv_and_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let first = data.join(manifest[0]["path"].as_str().unwrap());
    let out = tmp.path().join("frames");
    ok(&[
        "render", "--input", s(&first), "--out-dir", s(&out), "--chain", s(&data.join("chain.json")), "--every",
        "10", "--view", "side",
    ]);
    assert!(out.join("markers.csv").exists());
    let svgs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 3);
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = mdae(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = mdae(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn module_errors_exit_one_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = mdae(&["check-anatomy", "--manifest", s(&missing), "--chain", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["error"]["kind"], "io");
    assert!(v["error"]["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn bad_manipulation_target_is_invalid_argument() {
    let tmp = tempfile::tempdir().unwrap();
    let x = tmp.path().join("x.mdae");
    let out = mdae(&[
        "manipulate", "--input", s(&x), "--output", s(&x), "--checkpoint", s(&x), "--head", s(&x),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "invalid_argument");
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth", "--out-dir", s(&data), "--seed", "4", "--techniques", "LRK,HRK", "--skills", "0,1", "--per-cell",
        "5", "--frames", "20", "--log-level", "warn",
    ]);
    let ckpt = tmp.path().join("model.mdam");
    let m = data.join("manifest.json");
    ok(&[
        "train", "--manifest", s(&m), "--chain", s(&data.join("chain.json")), "--out", s(&ckpt), "--steps", "30",
        "--d-model", "16", "--heads", "2", "--layers", "1", "--d-ff", "32", "--d-z", "8", "--timesteps", "100",
        "--decode-steps", "5", "--all-splits", "--log-level", "warn",
    ]);
    let resumed = tmp.path().join("model2.mdam");
    ok(&[
        "train", "--manifest", s(&m), "--out", s(&resumed), "--resume", s(&ckpt), "--steps", "35", "--chain",
        s(&data.join("chain.json")), "--all-splits", "--log-level", "warn",
    ]);
    let emb = tmp.path().join("emb.csv");
    ok(&["embed", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--out", s(&emb)]);
    let head = tmp.path().join("head.mdah");
    ok(&["train-head", "--embeddings", s(&emb), "--out", s(&head), "--iterations", "200", "--split", "train"]);
    let out = ok(&["eval-separability", "--head", s(&head), "--embeddings", s(&emb)]);
    let sep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(sep["uar"].as_f64().is_some());
    let out = ok(&["eval-fid", "--a", s(&emb), "--b", s(&emb)]);
    let f: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(f["fid"].as_f64().unwrap().abs() < 1e-8, "{f}");
    let proj = tmp.path().join("proj.csv");
    ok(&["project", "--embeddings", s(&emb), "--out", s(&proj)]);
    assert_eq!(std::fs::read_to_string(&proj).unwrap().lines().count(), 21);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&m).unwrap()).unwrap();
    let input = data.join(manifest[0]["path"].as_str().unwrap());
    let output = tmp.path().join("out.csv");
    let trace = tmp.path().join("trace.json");
    let out = ok(&[
        "manipulate", "--input", s(&input), "--output", s(&output), "--checkpoint", s(&ckpt), "--head", s(&head),
        "--target-technique", "HRK", "--trace-out", s(&trace),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["lambda"].as_f64().unwrap() <= summary["lambda_max"].as_f64().unwrap());
    assert!(output.exists() && trace.exists());
}

#[test]
fn bundled_chain_matches_synthetic_markers() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "5");
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/full_body_chain.json");
    let out = ok(&["check-anatomy", "--manifest", s(&tmp.path().join("manifest.json")), "--chain", s(&bundled)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["mean_round_trip_error"].as_f64().unwrap() < 1e-6, "{report}");
}
