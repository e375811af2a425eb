use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vqfont(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqfont"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("VQFONT_DEVICE")
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON value")
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "error output is a single line: {err}");
    err
}

#[test]
fn evaluate_without_checkpoint_fails_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = vqfont(dir.path(), &["evaluate"]);
    assert!(error_line(&out).starts_with("MISSING_CHECKPOINT:"));
}

#[test]
fn usage_and_device_errors_are_single_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = vqfont(dir.path(), &["no-such-command"]);
    assert!(error_line(&out).starts_with("USAGE_ERROR:"));
    let out = Command::new(env!("CARGO_BIN_EXE_vqfont"))
        .args(["--run-dir", dir.path().to_str().unwrap(), "prepare-data"])
        .env("VQFONT_DEVICE", "cuda")
        .output()
        .unwrap();
    assert!(error_line(&out).starts_with("UNSUPPORTED:"));
}

#[test]
fn decompose_prints_category_and_positions() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table.tsv");
    std::fs::write(&table, "U+6797\tleft-right\t木,木\n").unwrap();
    let v = ok_json(vqfont(
        dir.path(),
        &["decompose", "--char", "林", "--table", table.to_str().unwrap(), "--grid", "16"],
    ));
    assert_eq!(v["codepoint"], "U+6797");
    assert_eq!(v["category"], "left-right");
    let comps = v["components"].as_array().unwrap();
    assert_eq!(comps.len(), 2);
    assert!(comps.iter().all(|c| c.as_array().unwrap().len() == 128));
    let out = vqfont(dir.path(), &["decompose", "--char", "U+4E00", "--table", table.to_str().unwrap()]);
    assert!(error_line(&out).starts_with("UNKNOWN_CHARACTER:"));
}

#[test]
fn short_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "preset = \"tiny\"\n[data]\nfonts = 3\nchars = 30\nseen_chars = 16\nreference_chars = 8\nunseen_chars = 6\n[stage1]\nbatch_size = 4\nlog_every = 1\n[stage2]\nbatch_size = 2\nlog_every = 1\n").unwrap();
    let c = cfg.to_str().unwrap();

    let v = ok_json(vqfont(&run, &["--config", c, "prepare-data"]));
    assert_eq!(v["chars"]["unseen"], 6);
    assert!(run.join("config.toml").is_file());
    assert!(run.join("data/glyphs/manifest.tsv").is_file());
    assert!(error_line(&vqfont(&run, &["--config", c, "prepare-data"])).starts_with("ARTIFACT_EXISTS:"));
    assert!(error_line(&vqfont(&run, &["--preset", "desk", "prepare-data"])).starts_with("CONFIG_ERROR:"));

    let v = ok_json(vqfont(&run, &["pretrain-vqgan", "--iterations", "3"]));
    assert_eq!(v["iterations"], 3);
    let log = std::fs::read_to_string(run.join("vqgan/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let rec: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(rec["iteration"].is_u64() && rec["l1"].is_f64() && rec["wall_time"].is_f64());
    assert!(run.join("vqgan/codebook.npy").is_file());

    let v = ok_json(vqfont(&run, &["train-vqfont", "--iterations", "2"]));
    assert_eq!(v["freeze_audit_holds"], true);
    assert!(v["token_accuracy"].is_f64());
    let ckpt = run.join("vqfont/final.safetensors");
    let ck = ckpt.to_str().unwrap();

    let v = ok_json(vqfont(&run, &["generate", "--ckpt", ck, "--split", "ufuc"]));
    assert_eq!(v["generated"]["UFUC"], 6);

    let grid = dir.path().join("grid.png");
    let v = ok_json(vqfont(&run, &["evaluate", "--ckpt", ck, "--grid", grid.to_str().unwrap()]));
    let summaries = v["summaries"].as_array().unwrap();
    assert_eq!(summaries.len(), 2);
    assert_eq!(summaries[0]["split"], "SFUC");
    assert_eq!(summaries[0]["count"], 2 * 6);
    assert!(summaries[0].get("lpips").is_none());
    assert!(dir.path().join("grid-UFUC.png").is_file());
    let tsv = std::fs::read_to_string(run.join("eval/vqfont-final/metrics.tsv")).unwrap();
    assert!(tsv.starts_with("split\tcount\tL1\tRMSE\tPSNR\tSSIM\n"));

    let v = ok_json(vqfont(&run, &["dump-attention", "--ckpt", ck, "--char", "U+4E00"]));
    assert_eq!((v["rows"].as_u64(), v["cols"].as_u64()), (Some(64), Some(3 * 64)));
    let dump: Value = serde_json::from_str(&std::fs::read_to_string(v["out"].as_str().unwrap()).unwrap()).unwrap();
    let row_sum: f64 = dump["patch"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((row_sum - 1.0).abs() < 1e-6);
    assert!(dump["enhanced_block_mass"].is_array());

    assert!(!run.join(".lock").exists());
}
