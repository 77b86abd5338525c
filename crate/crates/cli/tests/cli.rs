use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn neuromod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuromod"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = neuromod(args);
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

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Small trained model plus stats, scores and per-layer selections for subtasks A, B, C.
fn toy() -> Toy {
    let t = Toy { dir: tempfile::tempdir().unwrap() };
    let d = t.dir.path();
    ok(&["toy-train", "--samples-per-subtask", "64", "--eval-samples-per-subtask", "32", "--steps", "300", "--out-dir", s(d)]);
    let (model, data) = (t.path("model.nmod"), t.path("dataset.nmod"));
    ok(&["stats", "--model", s(&model), "--dataset", s(&data), "--out", s(&t.path("ref.nmod"))]);
    for name in ["A", "B", "C"] {
        let st = t.path(&format!("stats_{name}.nmod"));
        let sc = t.path(&format!("scores_{name}.nmod"));
        ok(&["stats", "--model", s(&model), "--dataset", s(&data), "--subtask", name, "--out", s(&st)]);
        ok(&["score", "--ref", s(&t.path("ref.nmod")), "--unlearn", s(&st), "--out", s(&sc)]);
        ok(&["select", "--scores", s(&sc), "--fraction", "0.125", "--out", s(&t.path(&format!("sel_{name}.json")))]);
    }
    t
}

#[test]
fn every_command_has_help() {
    for cmd in [
        "stats", "score", "select", "calibrate", "cluster", "overlap", "lorenz", "toy-train", "toy-eval", "report",
    ] {
        let out = neuromod(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd}");
    }
    assert_eq!(neuromod(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(neuromod(&["select", "--scores", "x.nmod"]).status.code(), Some(2));
    assert_eq!(neuromod(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_3_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent_ref.nmod");
    let out = neuromod(&["score", "--ref", s(&missing), "--unlearn", s(&missing), "--out", s(&dir.path().join("o.nmod"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent_ref.nmod"));
}

#[test]
fn corrupt_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.nmod");
    std::fs::write(&bad, b"NOTANARCHIVE at all, just text").unwrap();
    let out = neuromod(&["score", "--ref", s(&bad), "--unlearn", s(&bad), "--out", s(&dir.path().join("o.nmod"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_overlap_lorenz_and_report() {
    let t = toy();
    let sels: Vec<PathBuf> = ["A", "B", "C"].iter().map(|n| t.path(&format!("sel_{n}.json"))).collect();

    let csv_path = t.path("overlap.csv");
    ok(&["overlap", "--selection", s(&sels[0]), s(&sels[1]), s(&sels[2]), "--labels", "A,B,C", "--out", s(&csv_path)]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4, "{csv}");
    for (i, row) in rows.iter().skip(1).enumerate() {
        assert_eq!(row.len(), 4, "{csv}");
        assert_eq!(row[i + 1].parse::<f64>().unwrap(), 1.0, "{csv}");
    }
    let ov_json = t.path("overlap.json");
    ok(&["overlap", "--selection", s(&sels[0]), s(&sels[1]), s(&sels[2]), "--labels", "A,B,C", "--out", s(&ov_json)]);

    let clusters = t.path("clusters.json");
    ok(&["cluster", "--weights", s(&t.path("model.nmod")), "--k", "8", "--seed", "3", "--out", s(&clusters)]);
    assert!(t.path("clusters.nmod").exists());
    let auc = t.path("auc.json");
    let out = ok(&[
        "--json", "lorenz", "--selection", s(&sels[0]), s(&sels[1]), s(&sels[2]), "--clusters", s(&clusters), "--out", s(&auc),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mean = summary["mean_normalized_auc"].as_f64().unwrap();
    assert!((0.5..=1.0).contains(&mean), "{summary}");

    let (r1, r2) = (t.path("report1"), t.path("report2"));
    for r in [&r1, &r2] {
        ok(&["report", "--overlap", s(&ov_json), "--auc", s(&auc), "--out-dir", s(r)]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&r1).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3, "{names:?}");
    for n in names {
        assert_eq!(std::fs::read(r1.join(&n)).unwrap(), std::fs::read(r2.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn lorenz_rejects_global_top_selections() {
    let t = toy();
    let global = t.path("global.json");
    ok(&["select", "--scores", s(&t.path("scores_A.nmod")), "--fraction", "0.1", "--mode", "global-top", "--out", s(&global)]);
    let clusters = t.path("clusters.json");
    ok(&["cluster", "--weights", s(&t.path("model.nmod")), "--cluster-size", "8", "--out", s(&clusters)]);
    let out = neuromod(&["lorenz", "--selection", s(&global), "--clusters", s(&clusters), "--out", s(&t.path("a.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("per_layer_equal"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let t = toy();
    let cfg = t.path("neuromod.toml");
    std::fs::write(&cfg, "[select]\nfraction = 0.5\nmode = \"global-top\"\n").unwrap();
    let scores = t.path("scores_A.nmod");
    let out = ok(&["--json", "--config", s(&cfg), "select", "--scores", s(&scores), "--out", s(&t.path("x.json"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["fraction"], 0.5);
    let sel: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path("x.json")).unwrap()).unwrap();
    assert_eq!(sel["mode"], "global_top");

    let out = ok(&[
        "--json", "--config", s(&cfg), "select", "--scores", s(&scores), "--fraction", "0.25", "--out", s(&t.path("y.json")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["fraction"], 0.25);
}

#[test]
fn unreachable_calibration_exits_4() {
    let t = toy();
    let sel = t.path("cal_sel.json");
    let out = neuromod(&[
        "calibrate",
        "--model", s(&t.path("model.nmod")),
        "--dataset", s(&t.path("dataset.nmod")),
        "--scores", s(&t.path("scores_A.nmod")),
        "--subtask", "A",
        "--target-drop", "0.9",
        "--tolerance", "0.0",
        "--max-fraction", "0.01",
        "--out", s(&t.path("cal.json")),
        "--selection-out", s(&sel),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let cal: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path("cal.json")).unwrap()).unwrap();
    assert_eq!(cal["status"], "unreachable");
}

#[test]
fn toy_eval_reports_every_subtask() {
    let t = toy();
    let out = ok(&[
        "--json", "toy-eval", "--model", s(&t.path("model.nmod")), "--dataset", s(&t.path("dataset.nmod")),
        "--selection", s(&t.path("sel_A.json")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["subtasks"].as_array().unwrap().len(), 4);
    assert_eq!(v["relative_drop"].as_array().unwrap().len(), 4);
}

#[test]
fn stats_shards_merge() {
    let t = toy();
    let merged = t.path("merged.nmod");
    let mixed = neuromod(&["stats", "--merge", s(&t.path("stats_A.nmod")), s(&t.path("stats_B.nmod")), "--out", s(&merged)]);
    assert_eq!(mixed.status.code(), Some(2));
    ok(&["stats", "--merge", s(&t.path("stats_A.nmod")), s(&t.path("stats_A.nmod")), "--out", s(&merged)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(t.path("merged.json")).unwrap()).unwrap();
    assert_eq!(manifest["sample_count"], 128);
    assert_eq!(manifest["archive_path"], "merged.nmod");
}
