//! End-to-end runs of the compiled binary against a temp directory.

use std::path::Path;
use std::process::{Command, Output};

fn dll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dll"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(path: &Path, mode: &str, epochs: usize) {
    let text = format!(
        "# tiny end-to-end run\n\
         mode = {mode}\n\
         seed = 0\n\
         epochs = {epochs}\n\
         batch_size = 32\n\
         hidden = 6\n\
         metric_ks = 1,2\n\
         n_a = 3\n\
         n_s = 2\n\
         n_p = 5\n\
         d = 8\n\
         n_train = 96\n\
         n_test = 40\n"
    );
    std::fs::write(path, text).unwrap();
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_eval_and_gen_data_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dll.cfg");
    write_config(&cfg, "dll", 2);
    let out = dir.path().join("run");

    let res = dll(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "train failed: {}", stderr(&res));
    assert!(stdout(&res).contains("mean="));
    for name in ["metrics.csv", "per_class.csv", "runlog.csv", "ckpt_epoch002.ckpt", "ckpt_epoch002.bin"] {
        assert!(out.join(name).exists(), "{name} missing after train");
    }

    // Evaluation against the checkpoint's own test split.
    let eval_out = dir.path().join("eval");
    let ckpt = out.join("ckpt_epoch002");
    let res = dll(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    assert!(res.status.success(), "eval failed: {}", stderr(&res));
    assert!(eval_out.join("metrics.csv").exists());
    assert!(eval_out.join("per_class.csv").exists());

    // Generated records evaluate identically to the built-in split: same
    // config, same data seed.
    let data_out = dir.path().join("data");
    let res = dll(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data_out.to_str().unwrap()]);
    assert!(res.status.success(), "gen-data failed: {}", stderr(&res));
    for name in ["train.jsonl", "test.jsonl", "vocab.tsv"] {
        assert!(data_out.join(name).exists(), "{name} missing after gen-data");
    }
    let eval2_out = dir.path().join("eval2");
    let res = dll(&[
        "eval",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data_out.join("test.jsonl").to_str().unwrap(),
        "--out", eval2_out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "eval --data failed: {}", stderr(&res));
    let a = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    let b = std::fs::read_to_string(eval2_out.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn compare_tabulates_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("baseline.cfg");
    let pdl = dir.path().join("pdl.cfg");
    write_config(&base, "baseline", 1);
    write_config(&pdl, "pdl", 1);
    let out = dir.path().join("cmp");

    let res = dll(&[
        "compare",
        "--configs", base.to_str().unwrap(), pdl.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "compare failed: {}", stderr(&res));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("run,mode,seed"));
    assert!(lines[1].starts_with("baseline,baseline,0"));
    assert!(lines[2].starts_with("pdl,pdl,0"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let res = dll(&["train", "--config", "/nonexistent.cfg", "--out", dir.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("nonexistent.cfg"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "mode = dll\nnot_a_key = 1\n").unwrap();
    let res = dll(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("not_a_key"));

    // Files-backed config has nothing for gen-data to generate.
    let files_cfg = dir.path().join("files.cfg");
    std::fs::write(
        &files_cfg,
        "data = files\ntrain_path = a\ntest_path = b\nvocab_path = c\n",
    )
    .unwrap();
    let res = dll(&["gen-data", "--config", files_cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("synthetic"));
}

#[test]
fn resume_continues_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dll.cfg");
    write_config(&cfg, "dll", 3);
    let full_out = dir.path().join("full");
    let res = dll(&["train", "--config", cfg.to_str().unwrap(), "--out", full_out.to_str().unwrap()]);
    assert!(res.status.success(), "full train failed: {}", stderr(&res));

    let resumed_out = dir.path().join("resumed");
    let res = dll(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--out", resumed_out.to_str().unwrap(),
        "--resume", full_out.join("ckpt_epoch002").to_str().unwrap(),
    ]);
    assert!(res.status.success(), "resumed train failed: {}", stderr(&res));

    let a = std::fs::read(full_out.join("ckpt_epoch003.bin")).unwrap();
    let b = std::fs::read(resumed_out.join("ckpt_epoch003.bin")).unwrap();
    assert_eq!(a, b, "resumed final checkpoint differs from the unbroken run");
}
