use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "data": { "n_negatives": 128 },
  "eval": { "n_eval": 64 },
  "seeds": [0, 1]
}"#;

fn sgf(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgf"))
        .args(args)
        .env("SGF_OUTPUT_ROOT", out_root)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = sgf(&["verify", "ot"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let table = String::from_utf8_lossy(&ok.stdout);
    assert!(table.contains("PASS") && table.contains("ot"));
    let bad = sgf(&["verify", "nope"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown suite"));
}

#[test]
fn sample_is_reproducible_and_leaves_config_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let before = fs::read(&cfg).unwrap();
    let run = |root: &Path| {
        let out = sgf(&["sample", "-c", &cfg, "--seed", "3", "--steps", "8", "--trajectory"], root);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    assert_eq!(fs::read(&cfg).unwrap(), before);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n.to_string_lossy().ends_with("-trajectory.csv")));
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
    let summary = fs::read_to_string(a.join("eval.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().contains(",true,3,"));
}

#[test]
fn fig2_writes_record_and_refuses_foreign_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let root = dir.path().join("runs");
    let first = sgf(&["fig2", "-c", &cfg, "--steps", "10"], &root);
    // 0 when the ordering checks pass on this small run, 1 when they do not.
    assert!(matches!(first.status.code(), Some(0) | Some(1)), "{}", String::from_utf8_lossy(&first.stderr));
    let csv = fs::read_to_string(root.join("fig2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let json = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "json"))
        .unwrap();
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rec["kind"], "fig2");
    assert_eq!(rec["arms"].as_array().unwrap().len(), 3);

    // Same config again: nothing appended.
    let again = sgf(&["fig2", "-c", &cfg, "--steps", "10"], &root);
    assert_eq!(again.status.code(), first.status.code());
    assert_eq!(fs::read_to_string(root.join("fig2.csv")).unwrap(), csv);

    // A different configuration into the same directory is refused.
    let other = sgf(&["fig2", "-c", &cfg, "--steps", "11"], &root);
    assert_eq!(other.status.code(), Some(2));
    assert_eq!(fs::read_to_string(root.join("fig2.csv")).unwrap(), csv);
    let records = fs::read_dir(&root)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(records, 1);

    let rep = sgf(&["report", root.to_str().unwrap()], &root);
    assert!(String::from_utf8_lossy(&rep.stdout).contains("early"));
}

#[test]
fn ablation_emits_one_row_per_window_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let root = dir.path().join("runs");
    let out = sgf(
        &["ablate-windows", "-c", &cfg, "--steps", "10", "--seed", "0", "--windows", "extended"],
        &root,
    );
    assert!(matches!(out.status.code(), Some(0) | Some(1)), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(root.join("ablate-windows.csv")).unwrap();
    // five windows plus the unguided arm, one seed
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn invalid_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{ "seeds": [] }"#).unwrap();
    let out = sgf(&["fig2", "-c", p.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tiny.json");
    fs::write(
        &p,
        r#"{ "model": { "kind": "trained", "batch": 32, "steps": 5, "hidden": [8], "holdout": 32 } }"#,
    )
    .unwrap();
    let ckpt = dir.path().join("net.bin");
    let out = sgf(&["train", "-c", p.to_str().unwrap(), "--optimizer", "adam", "--out", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("held-out loss"));
}
