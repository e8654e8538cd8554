use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hope")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&hope(&[
        "gen-data", "--attrs", "3", "--objects", "4", "--dim", "8", "--samples", "4", "--test-samples", "2", "--out",
        p(&data),
    ]));
    data
}

fn trained(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let run = dir.join(name);
    ok(&hope(&["train", "--data", p(data), "--out", p(&run), "--epochs", "1,1,1", "--batch-size", "8"]));
    run
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = trained(dir.path(), &data, "run");
    for f in ["model.ckpt", "metrics.csv", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = run.join("model.ckpt");
    for world in ["closed", "open"] {
        ok(&hope(&["eval", "--ckpt", p(&ckpt), "--world", world]));
        for f in [format!("eval_{world}.json"), format!("eval_{world}_curve.csv"), format!("eval_{world}.csv")] {
            assert!(run.join(&f).is_file(), "{f}");
        }
    }
    let probe = run.join("probe.csv");
    ok(&hope(&["probe-retrieval", "--ckpt", p(&ckpt), "--out", p(&probe)]));
    assert!(probe.is_file());
    let experts = run.join("experts.csv");
    ok(&hope(&["report-experts", "--ckpt", p(&ckpt), "--out", p(&experts)]));
    assert!(fs::read_to_string(&experts).unwrap().starts_with("expert,kind,primitive,count"));
    let emb = run.join("emb.csv");
    ok(&hope(&["export-embeddings", "--ckpt", p(&ckpt), "--out", p(&emb)]));
    assert!(fs::read_to_string(&emb).unwrap().lines().count() > 1);
}

fn unseen_of(path: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["curve"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["unseen_acc"].as_f64().unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn open_world_best_unseen_is_no_better_than_closed() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = trained(dir.path(), &data, "run");
    let ckpt = run.join("model.ckpt");
    ok(&hope(&["eval", "--ckpt", p(&ckpt), "--world", "closed"]));
    ok(&hope(&["eval", "--ckpt", p(&ckpt), "--world", "open"]));
    assert!(unseen_of(&run.join("eval_open.json")) <= unseen_of(&run.join("eval_closed.json")) + 1e-12);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let a = trained(dir.path(), &data, "a");
    let b = trained(dir.path(), &data, "b");
    for f in ["model.ckpt", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupted_inputs_exit_one_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = trained(dir.path(), &data, "run");
    let ckpt = run.join("model.ckpt");

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = hope(&["eval", "--ckpt", p(&cut)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    let missing = hope(&["eval", "--ckpt", p(&dir.path().join("nope.ckpt"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("error:"));

    let broken = dir.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    for entry in fs::read_dir(&data).unwrap() {
        let e = entry.unwrap();
        let bytes = fs::read(e.path()).unwrap();
        fs::write(broken.join(e.file_name()), &bytes[..bytes.len() - 3]).unwrap();
    }
    let out = hope(&["train", "--data", p(&broken), "--out", p(&dir.path().join("x")), "--epochs", "1,0,0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(hope(&[]).status.code(), Some(2));
    assert_eq!(hope(&["train"]).status.code(), Some(2));
    assert_eq!(hope(&["eval", "--ckpt", "x", "--world", "sideways"]).status.code(), Some(2));
    assert_eq!(hope(&["train", "--data", "d", "--out", "o", "--epochs", "1,2"]).status.code(), Some(2));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let top = ok(&hope(&["--help"]));
    for cmd in ["gen-data", "train", "eval", "grad-check", "probe-retrieval", "report-experts", "ablate", "export-embeddings"] {
        assert!(top.contains(cmd), "{cmd}");
    }
    let train = ok(&hope(&["train", "--help"]));
    for flag in ["--data", "--out", "--config", "--seed", "--epochs", "--lr", "--batch-size", "--precision"] {
        assert!(train.contains(flag), "{flag}");
    }
}

#[test]
fn grad_check_passes_on_another_seed() {
    let out = ok(&hope(&["grad-check", "--seed", "1", "--max-entries", "6"]));
    assert!(!out.is_empty());
}

#[test]
fn eval_warns_on_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = trained(dir.path(), &data, "run");
    let cfg = fs::read_to_string(run.join("config.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
    v["seed"] = serde_json::json!(42);
    let other = dir.path().join("other.json");
    fs::write(&other, v.to_string()).unwrap();
    let out = hope(&["eval", "--ckpt", p(&run.join("model.ckpt")), "--config", p(&other)]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("warning:"), "{}", stderr(&out));

    let same = hope(&["eval", "--ckpt", p(&run.join("model.ckpt")), "--config", p(&run.join("config.json"))]);
    assert!(same.status.success());
    assert!(!stderr(&same).contains("does not match"), "{}", stderr(&same));
}

#[test]
fn small_ablation_writes_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let variants = dir.path().join("variants.json");
    fs::write(
        &variants,
        r#"[{"name":"base","overrides":{}},{"name":"one_shot","overrides":{"model":{"k_shots":1}}}]"#,
    )
    .unwrap();
    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"stage_epochs":[1,1,1],"batch_size":8,"eval_each_epoch":false}"#).unwrap();
    let out_csv = dir.path().join("ablation.csv");
    ok(&hope(&[
        "ablate", "--data", p(&data), "--variants", p(&variants), "--config", p(&config), "--seeds", "0,1", "--out",
        p(&out_csv),
    ]));
    let csv = fs::read_to_string(&out_csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2, "{csv}");
}
