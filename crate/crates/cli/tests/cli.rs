use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn roadlabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadlabel"))
        .args(args)
        .env_remove("ROADLABEL_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = roadlabel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Relative path → bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--frames", "3", "--seed", "7", "-o", s(&a)]);
    ok(&["synth", "--frames", "3", "--seed", "7", "-o", s(&b)]);
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    // the manifest records the command line, which names the output directory
    ta.remove("manifest.json");
    tb.remove("manifest.json");
    assert!(ta.len() > 10);
    assert!(ta == tb);

    let c = tmp.path().join("c");
    ok(&["synth", "--frames", "3", "--seed", "8", "-o", s(&c)]);
    assert_ne!(ta["images/f0001.png"], tree(&c)["images/f0001.png"]);
}

#[test]
fn ablate_reports_every_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    ok(&["synth", "--frames", "2", "-o", s(&seq)]);
    let out = tmp.path().join("ablate");
    let table = ok(&["ablate", "-i", s(&seq), "-o", s(&out)]);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 9, "{table}");
    assert!(rows[8].starts_with("C+H+G+CRF"));
    assert_eq!(
        std::fs::read_to_string(out.join("ablation.txt")).unwrap(),
        table
    );
    let reports: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 9);
}

#[test]
fn runs_reproduce_from_manifest_without_touching_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    ok(&["synth", "--frames", "2", "-o", s(&seq)]);
    let before = tree(&seq);

    let first = tmp.path().join("first");
    ok(&[
        "all",
        "-i",
        s(&seq),
        "-o",
        s(&first),
        "--set",
        "sigma_c=0.5",
        "--dump-debug",
    ]);
    assert_eq!(tree(&seq), before);
    let manifest = first.join("manifest.json");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["config"]["sigma_c"], 0.5);
    assert_eq!(m["frames"].as_array().unwrap().len(), 2);

    let second = tmp.path().join("second");
    ok(&[
        "all",
        "-i",
        s(&seq),
        "-o",
        s(&second),
        "--config",
        s(&manifest),
        "--dump-debug",
    ]);
    let (ta, tb) = (tree(&first), tree(&second));
    let artifacts: Vec<&String> = ta
        .keys()
        .filter(|k| k.starts_with("labels/") || k.starts_with("masks/"))
        .collect();
    assert!(artifacts.len() >= 14);
    for k in artifacts {
        assert!(ta[k] == tb[k], "{k} differs");
    }
    assert_eq!(ta["metrics.json"], tb["metrics.json"]);
}

#[test]
fn eval_scores_mask_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    ok(&["synth", "--frames", "2", "-o", s(&seq)]);
    let gt = seq.join("gt");
    let table = ok(&[
        "eval",
        "--pred",
        s(&gt),
        "--gt",
        s(&gt),
        "-o",
        s(&tmp.path().join("ev")),
    ]);
    assert!(table.lines().nth(1).unwrap().contains("100.0"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    for args in [
        vec!["label", "-i", s(&missing), "-o", s(tmp.path())],
        vec!["fit", "-i", s(tmp.path()), "--set", "no_such_key=1"],
        vec![
            "synth",
            "--frames",
            "1",
            "--scene",
            s(&missing),
            "-o",
            s(tmp.path()),
        ],
    ] {
        let out = roadlabel(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    }
}

#[test]
fn missing_feature_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    ok(&["synth", "--frames", "2", "-o", s(&seq)]);
    let victim = std::fs::read_dir(seq.join("features"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::remove_file(&victim).unwrap();
    let out = roadlabel(&["label", "-i", s(&seq), "-o", s(&tmp.path().join("out"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains(victim.file_name().unwrap().to_str().unwrap()),
        "{err}"
    );
}

#[test]
fn manifest_records_every_frame_once() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    ok(&["synth", "--frames", "3", "-o", s(&seq)]);
    let out = tmp.path().join("out");
    ok(&["all", "-i", s(&seq), "-o", s(&out)]);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let frames = m["frames"].as_array().unwrap();
    let mut ids: Vec<&str> = frames
        .iter()
        .map(|f| f["frame_id"].as_str().unwrap())
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 3);
    for f in frames {
        assert_eq!(f["status"], "ok");
        let p = &f["provenance"];
        let total: u64 = ["both", "camera_only", "lidar_only", "neither"]
            .iter()
            .map(|k| p[k].as_u64().unwrap())
            .sum();
        assert_eq!(total, 800 * 300);
    }
    assert!(m["config_hash"].is_string());

    let skipped = tmp.path().join("skipped");
    let res = roadlabel(&[
        "label",
        "-i",
        s(&seq),
        "-o",
        s(&skipped),
        "--set",
        "camera.min_prototype_patches=100000",
    ]);
    assert!(!res.status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(skipped.join("manifest.json")).unwrap()).unwrap();
    let frames = m["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 3);
    for f in frames {
        assert_eq!(f["status"], "skipped");
        assert!(f["reason"].as_str().unwrap().contains("prototype"));
    }
}

#[test]
fn fuse_rebuilds_masks_from_saved_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    ok(&["synth", "--frames", "2", "-o", s(&seq)]);
    let run = tmp.path().join("run");
    ok(&["label", "-i", s(&seq), "-o", s(&run)]);
    let fused = tmp.path().join("fused");
    ok(&["fuse", "--labels", s(&run.join("labels")), "--images", s(&seq.join("images")), "-o", s(&fused)]);
    let a = tree(&run.join("masks"));
    let b = tree(&fused.join("masks"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let table = ok(&["eval", "--pred", s(&fused.join("masks")), "--gt", s(&run.join("masks")), "-o", s(&tmp.path().join("ev"))]);
    let iou: f64 = table.lines().nth(1).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(iou > 98.0, "{table}");

    let victim = std::fs::read_dir(run.join("labels")).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(victim.join("lidar.png")).unwrap();
    let partial = tmp.path().join("partial");
    ok(&["fuse", "--labels", s(&run.join("labels")), "-o", s(&partial)]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(partial.join("manifest.json")).unwrap()).unwrap();
    let statuses: Vec<&str> = m["frames"].as_array().unwrap().iter().map(|f| f["status"].as_str().unwrap()).collect();
    assert_eq!(statuses.iter().filter(|s| **s == "skipped").count(), 1);
    assert_eq!(statuses.len(), 2);
}
