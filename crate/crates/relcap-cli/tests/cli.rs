//! End-to-end runs of the installed binary against tiny datasets.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_relcap")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RELCAP_LOG", "error")
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "data": {
            "train_examples": 24,
            "val_examples": 8,
            "questions_per_image": 2,
            "max_objects": 4,
            "feature_dim": 6,
            "captions_per_question": 3,
            "max_caption_tokens": 10,
            "noise": 0.05,
            "count_partial": 0.3
        },
        "model": {
            "embed_dim": 5,
            "hidden_dim": 6,
            "attn_dim": 5,
            "decoder_att_dim": 6,
            "decoder_lang_dim": 6
        },
        "train": { "batch_size": 8, "epochs": 1, "lr": 0.01 },
        "phase2": { "epochs": 1, "captions_per_pair": 3, "max_len": 10 }
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, format!("{cfg:#}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn gen_data(cfg: &str, out: &Path) {
    assert_ok(&run(&[
        "--config",
        cfg,
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
        "gen-data",
    ]));
}

#[test]
fn gen_data_writes_a_complete_dataset_with_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("data");
    let res = run(&["--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap(), "gen-data"]);
    assert_ok(&res);
    let text = stdout(&res);
    assert!(text.contains("24 train and 8 val records"), "summary line missing: {text}");
    assert!(text.contains("answer candidates"), "summary line missing: {text}");
    for f in [
        "dataset.json",
        "vocab.json",
        "train.manifest.jsonl",
        "train.features.bin",
        "train.meta.jsonl",
        "val.manifest.jsonl",
        "val.features.bin",
        "val.meta.jsonl",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["status"], "ok");
    assert!(manifest["finished"].is_string());
    // the recorded config carries every field, not just the ones the file set
    assert_eq!(manifest["config"]["data"]["max_objects"], 4);
    assert_eq!(manifest["config"]["train"]["clip_norm"], 10.0);
    assert_eq!(manifest["config"]["phase2"]["lr_factor"], 0.25);
    assert_eq!(manifest["config"]["select"]["xi"], 0.0);
}

#[test]
fn existing_outputs_need_force_to_overwrite() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("data");
    gen_data(&cfg, &out);

    let again =
        run(&["--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap(), "gen-data"]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "hint missing: {}", stderr(&again));

    let forced = run(&[
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--force",
        "gen-data",
    ]);
    assert_ok(&forced);
}

#[test]
fn identical_seeds_reproduce_identical_datasets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_data(&cfg, &a);
    gen_data(&cfg, &b);
    for f in ["dataset.json", "vocab.json", "train.manifest.jsonl", "train.features.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn a_single_candidate_caption_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("data");
    let res = run(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "gen-data",
        "--captions",
        "1",
    ]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("at least 2"), "got: {}", stderr(&res));
    assert!(!out.join("dataset.json").exists(), "rejected run must not write outputs");
}

#[test]
fn finetune_demands_a_checkpoint_argument() {
    let res = run(&["finetune", "--data", "somewhere"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("--checkpoint"));
}

#[test]
fn gradcheck_passes_from_a_fresh_init() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    let res = run(&["--seed", "12", "--out", out.to_str().unwrap(), "gradcheck"]);
    assert_ok(&res);
    let text = stdout(&res);
    assert!(text.contains("PASS"), "got: {text}");
    assert!(!text.contains("FAIL"), "got: {text}");
    assert!(out.join("gradcheck.json").exists());
}

#[test]
fn report_rejects_a_csv_without_rows() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("metrics.csv");
    std::fs::write(
        &empty,
        "epoch,phase,train_loss,val_soft_acc,feasible_rate,planted_recovery,mean_inner_product\n",
    )
    .unwrap();
    let out = tmp.path().join("rep");
    let res = run(&["--out", out.to_str().unwrap(), "report", empty.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("no metric rows"), "got: {}", stderr(&res));
}

#[test]
fn pipeline_runs_end_to_end_on_a_tiny_world() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    gen_data(&cfg, &data);
    let data_s = data.to_str().unwrap();

    let run1 = tmp.path().join("run1");
    let res = run(&[
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        run1.to_str().unwrap(),
        "train",
        "--data",
        data_s,
        "--epochs",
        "1",
        "--limit",
        "16",
    ]);
    assert_ok(&res);
    let metrics = std::fs::read_to_string(run1.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "header plus one epoch: {metrics}");
    let ckpt = run1.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let caps = tmp.path().join("caps");
    let res = run(&[
        "--config",
        &cfg,
        "--out",
        caps.to_str().unwrap(),
        "generate-captions",
        "--data",
        data_s,
        "--checkpoint",
        ckpt_s,
        "--split",
        "val",
    ]);
    assert_ok(&res);
    let dump = std::fs::read_to_string(caps.join("captions.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 8, "one row per val example");

    let ft = tmp.path().join("ft");
    let res = run(&[
        "--config",
        &cfg,
        "--out",
        ft.to_str().unwrap(),
        "finetune",
        "--data",
        data_s,
        "--checkpoint",
        ckpt_s,
        "--epochs",
        "1",
    ]);
    assert_ok(&res);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ft.join("manifest.json")).unwrap())
            .unwrap();
    let p1 = manifest["facts"]["phase1_lr"].as_f64().unwrap();
    let p2 = manifest["facts"]["phase2_lr"].as_f64().unwrap();
    assert_eq!(p2, p1 * 0.25, "second phase steps at a quarter of the first");
    assert_eq!(manifest["facts"]["captions_per_pair"], 3);

    let ev = tmp.path().join("ev");
    let res = run(&[
        "--config",
        &cfg,
        "--out",
        ev.to_str().unwrap(),
        "eval",
        "--data",
        data_s,
        "--checkpoint",
        ft.join("model.ckpt").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout(&res);
    assert!(text.contains("soft accuracy"), "got: {text}");

    let emd = tmp.path().join("emd");
    let res = run(&[
        "--config",
        &cfg,
        "--out",
        emd.to_str().unwrap(),
        "emd",
        "--data",
        data_s,
        "--checkpoint",
        ft.join("model.ckpt").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let csv = std::fs::read_to_string(emd.join("emd.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("caa_flag"));
    assert!(csv.contains(",true") && csv.contains(",false"), "both settings in one file");

    let rep = tmp.path().join("rep");
    let res = run(&[
        "--out",
        rep.to_str().unwrap(),
        "report",
        run1.join("metrics.csv").to_str().unwrap(),
        ft.join("metrics.csv").to_str().unwrap(),
        "--emd",
        emd.join("emd.json").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let md = std::fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("| run1 |") && md.contains("| ft |"), "run rows: {md}");
    assert!(md.contains("w/ caa") && md.contains("w/o caa"), "both arms side by side: {md}");
    assert!(rep.join("loss.svg").exists() && rep.join("emd.svg").exists());

    // the same report twice produces the same bytes
    let rep2 = tmp.path().join("rep2");
    let res = run(&[
        "--out",
        rep2.to_str().unwrap(),
        "report",
        run1.join("metrics.csv").to_str().unwrap(),
        ft.join("metrics.csv").to_str().unwrap(),
        "--emd",
        emd.join("emd.json").to_str().unwrap(),
    ]);
    assert_ok(&res);
    assert_eq!(
        std::fs::read(rep.join("loss.svg")).unwrap(),
        std::fs::read(rep2.join("loss.svg")).unwrap()
    );
    assert_eq!(
        std::fs::read(rep.join("emd.svg")).unwrap(),
        std::fs::read(rep2.join("emd.svg")).unwrap()
    );
}
