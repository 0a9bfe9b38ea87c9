use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 14] = [
    "--n-known", "4", "--n-novel", "5", "--images-per-class", "8", "--heldout-per-class", "2", "--widths", "4,8",
    "--batch-size", "8", "--milestones", "",
];

fn cfsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cfsl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn gen(root: &Path) -> String {
    let data = root.join("data").display().to_string();
    ok(&with_small(&["gen-data", "--out", &data]));
    data
}

#[test]
fn gen_data_writes_every_split_and_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path());
    for split in ["known_train", "known_heldout", "novel"] {
        assert!(Path::new(&data).join(split).is_dir(), "{split}");
    }
    let manifest = fs::read_to_string(Path::new(&data).join("manifest.txt")).unwrap();
    assert!(manifest.contains("n_known=4"));
}

#[test]
fn invalid_spec_exits_with_config_error_naming_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cfsl(&["gen-data", "--out", &tmp.path().join("d").display().to_string(), "--parts-per-class", "40"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("parts_per_class"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "bogus=1\n").unwrap();
    let out = cfsl(&["gen-data", "--out", &tmp.path().join("d").display().to_string(), "--config", &cfg.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file_and_config_is_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path());
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "epochs=5\nlr0=0.2\n").unwrap();
    let rd = tmp.path().join("run");
    let args = with_small(&[
        "train", "--data", &data, "--run-dir", rd.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--epochs", "0",
    ]);
    ok(&args);
    let echoed = fs::read_to_string(rd.join("config.txt")).unwrap();
    assert!(echoed.contains("epochs=0\n") && echoed.contains("lr0=0.2\n"), "{echoed}");
}

#[test]
fn zero_epochs_emit_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path());
    let rd = tmp.path().join("run");
    ok(&with_small(&["train", "--data", &data, "--run-dir", rd.to_str().unwrap(), "--epochs", "0"]));
    let mut ckpts: Vec<String> = fs::read_dir(&rd)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, vec!["epoch_000.ckpt", "model.ckpt"]);
    assert_eq!(fs::read(rd.join("epoch_000.ckpt")).unwrap(), fs::read(rd.join("model.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(rd.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn train_eval_and_analyze_are_reproducible_and_traceable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path());
    let mut hashes = Vec::new();
    let mut evals = Vec::new();
    for run in ["a", "b"] {
        let rd = tmp.path().join(format!("run_{run}"));
        let summary = ok(&with_small(&[
            "train", "--data", &data, "--run-dir", rd.to_str().unwrap(), "--epochs", "1", "--no-split", "--no-er", "--no-rot",
            "--no-sparse",
        ]));
        let hash = summary.lines().find_map(|l| l.strip_prefix("checkpoint_hash=")).unwrap().to_string();
        let ck = rd.join("model.ckpt");
        for (k, n) in [("5", "1"), ("5", "5")] {
            let ev = tmp.path().join(format!("eval_{run}_{n}"));
            ok(&with_small(&[
                "eval", "--checkpoint", ck.to_str().unwrap(), "--data", &data, "--out", ev.to_str().unwrap(), "--k-way", k,
                "--n-shot", n, "--n-query", "2", "--n-episodes", "20",
            ]));
            let summary = fs::read_to_string(ev.join("summary.txt")).unwrap();
            assert!(summary.contains(&format!("checkpoint_hash={hash}")));
            assert!(summary.contains(&format!("N={n}")));
            evals.push(fs::read(ev.join("eval.csv")).unwrap());
        }
        let an = tmp.path().join(format!("bins_{run}"));
        ok(&with_small(&[
            "analyze", "bins", "--checkpoint", ck.to_str().unwrap(), "--data", &data, "--out", an.to_str().unwrap(), "--n-bins",
            "8",
        ]));
        assert_eq!(fs::read_to_string(an.join("bins.csv")).unwrap().lines().count(), 9);
        assert!(fs::read_to_string(an.join("provenance.txt")).unwrap().contains(&hash));
        hashes.push(hash);
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(evals[0], evals[2]);
    assert_eq!(evals[1], evals[3]);
}

#[test]
fn heatmap_writes_one_graymap_and_one_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path());
    let rd = tmp.path().join("run");
    ok(&with_small(&["train", "--data", &data, "--run-dir", rd.to_str().unwrap(), "--epochs", "0"]));
    let out = tmp.path().join("hm");
    let ck = rd.join("model.ckpt");
    ok(&with_small(&["analyze", "heatmap", "--checkpoint", ck.to_str().unwrap(), "--data", &data, "--out", out.to_str().unwrap()]));
    assert!(fs::read_to_string(out.join("heatmap.pgm")).unwrap().starts_with("P2"));
    assert!(fs::read_to_string(out.join("heatmap.csv")).unwrap().starts_with("row,col,value"));
}

#[test]
fn bad_inputs_map_to_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing").display().to_string();
    let rd = tmp.path().join("run").display().to_string();
    assert_eq!(cfsl(&["train", "--data", &missing, "--run-dir", &rd]).status.code(), Some(3));
    let data = gen(tmp.path());
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"NOTACHECKPOINT").unwrap();
    let out = tmp.path().join("o").display().to_string();
    let r = cfsl(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", &data, "--out", &out]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bad.ckpt"));
    assert_ne!(cfsl(&["train"]).status.code(), Some(0));
}
