use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use logocap::cmp::init_params;
use logocap::pipeline::{load_checkpoint, TrainConfig};

fn logocap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logocap"))
        .args(args)
        .env("LOGOCAP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--count", "3"];
    args.extend_from_slice(extra);
    let out = logocap(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn noiseless(dir: &Path) {
    synth(
        dir,
        &["--jitter", "0", "--heatmap-noise", "0", "--persons", "2"],
    );
}

#[test]
fn synth_is_reproducible_and_echoes_config() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, &["--seed", "3"]);
    synth(&b, &["--seed", "3"]);
    for f in [
        "gt.json",
        "scene_00002/heatmaps.lgct",
        "scene_00003/features.lgct",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["settings"]["scene"]["seed"], 3);
    assert_eq!(cfg["settings"]["count"], 3);
}

#[test]
fn synth_into_invalid_path_leaves_nothing() {
    let t = tempfile::tempdir().unwrap();
    let out = logocap(&["synth", "--out", p(&t.path().join("missing/deeper"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_dir(t.path()).unwrap().count(), 0);

    let blocker = t.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = logocap(&["synth", "--out", p(&blocker.join("scenes"))]);
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(fs::read_dir(t.path()).unwrap().count(), 1);
}

#[test]
fn unknown_flags_are_rejected() {
    let out = logocap(&["synth", "--out", "x", "--colour", "red"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn baseline_on_noiseless_scenes_scores_ap_one() {
    let t = tempfile::tempdir().unwrap();
    let scenes = t.path().join("s");
    noiseless(&scenes);
    let res = t.path().join("r");
    let out = logocap(&[
        "refine",
        "--scenes",
        p(&scenes),
        "--baseline",
        "--out",
        p(&res),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval = t.path().join("e");
    let out = logocap(&[
        "eval",
        "--results",
        p(&res.join("results.json")),
        "--gt",
        p(&scenes.join("gt.json")),
        "--out",
        p(&eval),
    ]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",1.000000"), "{line}");
    }
    assert!(eval.join("ap.csv").exists() && eval.join("config.json").exists());
}

#[test]
fn bound_gap_is_zero_without_noise() {
    let t = tempfile::tempdir().unwrap();
    let scenes = t.path().join("s");
    noiseless(&scenes);
    let out = logocap(&["bound", "--scenes", p(&scenes), "--k", "11"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["baseline"]["mean_oks"], 1.0);
    assert_eq!(v["gap"]["mean_oks"], 0.0);
    assert_eq!(v["gap"]["ap"], 0.0);
}

#[test]
fn zero_epochs_checkpoint_equals_initial_parameters() {
    let t = tempfile::tempdir().unwrap();
    let scenes = t.path().join("s");
    synth(&scenes, &["--feature-channels", "17"]);
    let train = t.path().join("t");
    let out = logocap(&[
        "train-toy",
        "--scenes",
        p(&scenes),
        "--out",
        p(&train),
        "--epochs",
        "0",
        "--seed",
        "5",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let loaded = load_checkpoint(train.join("checkpoint")).unwrap();
    let cfg = TrainConfig {
        seed: 5,
        ..TrainConfig::default()
    };
    assert_eq!(loaded, init_params(5, &cfg.cmp_config(17)).unwrap());
    assert_eq!(
        fs::read_to_string(train.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn refine_checks_checkpoint_presence_and_shape() {
    let t = tempfile::tempdir().unwrap();
    let scenes = t.path().join("s");
    synth(&scenes, &[]);
    let missing = t.path().join("nope");
    let out = logocap(&[
        "refine",
        "--scenes",
        p(&scenes),
        "--checkpoint",
        p(&missing),
        "--out",
        p(&t.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));

    let train = t.path().join("t");
    let out = logocap(&[
        "train-toy",
        "--scenes",
        p(&scenes),
        "--out",
        p(&train),
        "--steps",
        "2",
        "--d",
        "4",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ck = train.join("checkpoint");
    let rejected = t.path().join("r");
    for bad in [vec!["--d", "8"], vec!["--norm", "plain"], vec!["--k", "9"]] {
        let mut args = vec!["refine", "--scenes", p(&scenes), "--checkpoint", p(&ck)];
        args.extend(["--out", p(&rejected)]);
        args.extend(bad.iter().copied());
        let out = logocap(&args);
        assert_eq!(out.status.code(), Some(1), "{bad:?}");
    }
    let out = logocap(&[
        "refine",
        "--scenes",
        p(&scenes),
        "--checkpoint",
        p(&ck),
        "--d",
        "4",
        "--perturb",
        "4",
        "--out",
        p(&t.path().join("ok")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("ok/results.json")).unwrap())
            .unwrap();
    for r in results.as_array().unwrap() {
        assert_eq!(r["keypoints"].as_array().unwrap().len(), 51);
        assert_eq!(r["category_id"], 1);
    }
}

#[test]
fn config_file_is_layered_under_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"count": 2, "scene": {"seed": 9, "height": 96, "width": 96}}"#,
    )
    .unwrap();
    let out_dir = t.path().join("s");
    let out = logocap(&[
        "synth",
        "--config",
        p(&cfg),
        "--seed",
        "4",
        "--out",
        p(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["settings"]["count"], 2);
    assert_eq!(echo["settings"]["scene"]["seed"], 4);
    assert_eq!(echo["settings"]["scene"]["height"], 96);

    fs::write(&cfg, r#"{"scene": {"colour": 1}}"#).unwrap();
    let out = logocap(&[
        "synth",
        "--config",
        p(&cfg),
        "--out",
        p(&t.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = logocap(&[
        "synth",
        "--config",
        p(&t.path().join("none.json")),
        "--out",
        p(&t.path().join("y")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_writes_both_charts() {
    let t = tempfile::tempdir().unwrap();
    let csv = t.path().join("loss.csv");
    fs::write(
        &csv,
        "step,L_H,L_Hr,L_O,L_K,total\n0,1,2,0,3,4\n1,1,1,0,2,3\n",
    )
    .unwrap();
    let summary = t.path().join("summary.json");
    fs::write(
        &summary,
        r#"{"baseline_mean_oks": 0.9, "refined_mean_oks": 0.95, "oracle_mean_oks": 0.99}"#,
    )
    .unwrap();
    let out_dir = t.path().join("p");
    let out = logocap(&[
        "plot",
        "--loss",
        p(&csv),
        "--summary",
        p(&summary),
        "--out",
        p(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line = fs::read_to_string(out_dir.join("loss.svg")).unwrap();
    assert!(line.starts_with("<svg") && line.contains("<polyline"));
    let bars = fs::read_to_string(out_dir.join("oks.svg")).unwrap();
    assert!(bars.contains("refined") && bars.contains("0.9900"));

    fs::write(&csv, "step,total\n0,abc\n").unwrap();
    let out = logocap(&["plot", "--loss", p(&csv), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("record 1"));
}
