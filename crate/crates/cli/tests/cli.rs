mod common;

use std::fs;

use common::*;
use siamman::model::SiamMan;
use siamman_cli::{sidecar_path, write_params};

const GT: &str = "10,10,50,40\n12,11,52,41\n14,12,54,42\n16,13,56,43\n";

#[test]
fn config_prints_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(&["config"]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("[fusion]") && text.contains("omega1 = 0.7"));

    let bad = write(dir.path(), "bad.toml", "[fusion]\nomega3 = 0.1\n");
    let o = run(&["--config", bad.to_str().unwrap(), "config"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("omega3"), "{}", stderr(&o));

    let missing = run(&["--config", "/nonexistent/run.toml", "config"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["score", "--protocol", "xyz", "--traj", "a", "--gt", "b", "--out", "c"])), 2);
}

#[test]
fn gradcheck_filter_and_fault() {
    let o = run(&["gradcheck", "--filter", "xcorr", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("xcorr_depthwise"));
    assert!(!out.contains("conv2d"));

    let f = run(&["gradcheck", "--filter", "xcorr", "--seeds", "2", "--inject-fault", "xcorr_depthwise"]);
    assert_eq!(code(&f), 1);

    let none = run(&["gradcheck", "--filter", "no_such_case"]);
    assert_eq!(code(&none), 2);
}

#[test]
fn track_one_frame_sequence_returns_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg_path = write_config(dir.path(), &cfg);
    let ckpt = dir.path().join("model.ckpt");
    write_params(&ckpt, &SiamMan::new(cfg.model.clone()).unwrap().params).unwrap();
    let seq = dir.path().join("seq");
    let s = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "synth",
        "--out",
        seq.to_str().unwrap(),
        "--frames",
        "1",
    ]);
    assert_eq!(code(&s), 0, "{}", stderr(&s));
    let init = String::from_utf8(s.stdout).unwrap().trim().to_string();
    let out = dir.path().join("traj.csv");
    let t = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "track",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequence",
        seq.to_str().unwrap(),
        "--init",
        &init,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.trim(), format!("{init},1.0000"));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
    assert_eq!(side["frames"], 1);
    assert_eq!(side["mean_score"], 1.0);
}

#[test]
fn track_reports_missing_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg_path = write_config(dir.path(), &cfg);
    let ckpt = dir.path().join("model.ckpt");
    write_params(&ckpt, &SiamMan::new(cfg.model.clone()).unwrap().params).unwrap();
    let seq = dir.path().join("seq");
    let s = run(&["synth", "--out", seq.to_str().unwrap(), "--frames", "3"]);
    assert_eq!(code(&s), 0);
    fs::remove_file(seq.join("00000002.ppm")).unwrap();
    let t = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "track",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequence",
        seq.to_str().unwrap(),
        "--init",
        "10,10,40,40",
        "--out",
        dir.path().join("t.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&t), 2);
    assert!(stderr(&t).contains("missing frame 2"), "{}", stderr(&t));
}

fn score(dir: &std::path::Path, protocol: &str, traj: &str, gt: &str) -> (std::process::Output, serde_json::Value) {
    let t = write(dir, "traj.txt", traj);
    let g = write(dir, "gt.txt", gt);
    let out = dir.join("scores");
    let o = run(&[
        "score",
        "--protocol",
        protocol,
        "--traj",
        t.to_str().unwrap(),
        "--gt",
        g.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let report = fs::read_to_string(out.join("report.json"))
        .ok()
        .map(|s| serde_json::from_str(&s).unwrap())
        .unwrap_or(serde_json::Value::Null);
    (o, report)
}

#[test]
fn score_perfect_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let (o, r) = score(dir.path(), "otb", GT, GT);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r["success_auc"].as_f64().unwrap(), 100.0 / 101.0);
    assert_eq!(r["precision_at_20"].as_f64().unwrap(), 1.0);
    assert!(dir.path().join("scores/success.csv").exists());

    let (o, r) = score(dir.path(), "vot", GT, GT);
    assert_eq!(code(&o), 0);
    assert_eq!(r["accuracy"].as_f64().unwrap(), 1.0);
    assert_eq!(r["robustness"].as_f64().unwrap(), 0.0);

    let conf = "10,10,50,40,0.9\n12,11,52,41,0.8\n14,12,54,42,0.7\n16,13,56,43,0.6\n";
    let (o, r) = score(dir.path(), "ltb", conf, GT);
    assert_eq!(code(&o), 0);
    assert_eq!(r["max_f_score"].as_f64().unwrap(), 1.0);
}

#[test]
fn score_malformed_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = score(dir.path(), "otb", "10,10,50,40\n1,2,x,4\n14,12,54,42\n16,13,56,43\n", GT);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let (o, _) = score(dir.path(), "otb", "10,10,50,40\n", GT);
    assert_eq!(code(&o), 2);
}

#[test]
fn score_is_byte_stable_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "t.txt", "10,10,50,40\n13,11,53,41\n30,12,70,42\n16,13,56,43\n");
    let g = write(dir.path(), "g.txt", GT);
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("s{threads}"));
        let mut args = vec!["score", "--protocol", "otb"];
        for _ in 0..3 {
            args.extend(["--traj", t.to_str().unwrap(), "--gt", g.to_str().unwrap()]);
        }
        args.extend(["--out", out.to_str().unwrap()]);
        let o = bin().args(&args).env("SIAMMAN_THREADS", threads).output().unwrap();
        assert_eq!(code(&o), 0);
        outs.push(snapshot(&out));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn train_fails_fast_on_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "not a directory");
    let out = blocker.join("run");
    let started = std::time::Instant::now();
    let o = run(&["train", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(started.elapsed().as_secs() < 10);
}

#[test]
fn train_and_track_rerun_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &quick_config());
    let c = cfg_path.to_str().unwrap();
    let seq = dir.path().join("seq");
    let s = run(&["--config", c, "--seed", "4", "synth", "--out", seq.to_str().unwrap(), "--frames", "4"]);
    let init = String::from_utf8(s.stdout).unwrap().trim().to_string();
    let mut snaps = Vec::new();
    for r in 0..2 {
        let out = dir.path().join(format!("run{r}"));
        let o = run(&["--config", c, "train", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for stage in 1..=3 {
            assert!(out.join(format!("stage{stage}.ckpt")).exists());
        }
        let log = fs::read_to_string(out.join("train.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);
        let traj = out.join("traj.csv");
        let t = run(&[
            "--config",
            c,
            "track",
            "--checkpoint",
            out.join("stage3.ckpt").to_str().unwrap(),
            "--sequence",
            seq.to_str().unwrap(),
            "--init",
            &init,
            "--out",
            traj.to_str().unwrap(),
        ]);
        assert_eq!(code(&t), 0, "{}", stderr(&t));
        assert_eq!(fs::read_to_string(&traj).unwrap().lines().count(), 4);
        snaps.push(snapshot(&out));
    }
    assert_eq!(snaps[0], snaps[1]);
}
