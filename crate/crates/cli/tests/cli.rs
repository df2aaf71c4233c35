use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecgraph::data::{parse_dataset, to_json_string, ParseMode};
use ecgraph::encoder::FeatureFile;
use ecgraph::synthetic::stub_features;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
[model.encoder]
d_text = 16
n_heads = 2
n_layers = 1
d_speaker = 4
max_len = 32

[model.decoder]
d_g = 8

[train]
epochs = 3
patience = 3
"#;

fn ecgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgraph"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn user_error(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// A temp dir holding `data.json` (10 synthetic conversations) and `small.toml`.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&ecgraph(
        dir.path(),
        &["synth", "--out", "data.json", "--conversations", "10", "--seed", "5"],
    ));
    dir
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "data.json", "--config", "small.toml", "--out", out, "--seed", "3"];
    args.extend_from_slice(extra);
    ecgraph(dir, &args)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn weighted_f1(report: &Value, mode: &str) -> f64 {
    report
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["mode"] == mode)
        .unwrap_or_else(|| panic!("no {mode} row in {report}"))["f1"]
        .as_f64()
        .unwrap()
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = workspace();
    let d = dir.path();
    let before = fs::read(d.join("data.json")).unwrap();

    ok(&train(d, "run", &[]));
    for f in ["model.uft1", "model.json", "train_log.json", "manifest.json"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let manifest = json(d.join("run/manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["model"]["decoder"]["d_g"], 8);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["role"] == "config"));
    let data_hash = inputs.iter().find(|i| i["role"] == "train data").unwrap()["blob_sha256"].clone();
    assert_eq!(data_hash.as_str().unwrap().len(), 64);

    ok(&ecgraph(
        d,
        &["predict", "--checkpoint", "run/model.uft1", "--data", "data.json", "--out", "preds.json"],
    ));
    let preds = json(d.join("preds.json"));
    assert_eq!(preds.as_array().unwrap().len(), 10);
    let pm = json(d.join("preds.manifest.json"));
    assert_eq!(pm["command"], "predict");
    assert_eq!(pm["inputs"].as_array().unwrap().len(), 3);

    let out = ok(&ecgraph(d, &["eval", "--pred", "preds.json", "--gold", "data.json", "--json", "--out", "score.json"]));
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);
    assert_eq!(report, json(d.join("score.json")));
    for mode in ["strict", "proportional", "pair_only"] {
        assert!((0.0..=1.0).contains(&weighted_f1(&report, mode)));
    }
    assert!(weighted_f1(&report, "proportional") >= weighted_f1(&report, "strict"));
    assert!(d.join("score.manifest.json").is_file());

    // the input dataset is read, never rewritten
    assert_eq!(fs::read(d.join("data.json")).unwrap(), before);
}

#[test]
fn training_replays_exactly() {
    let dir = workspace();
    let d = dir.path();
    ok(&train(d, "a", &["--threads", "1"]));
    ok(&train(d, "b", &["--threads", "1"]));
    assert_eq!(fs::read(d.join("a/train_log.json")).unwrap(), fs::read(d.join("b/train_log.json")).unwrap());
    assert_eq!(fs::read(d.join("a/model.uft1")).unwrap(), fs::read(d.join("b/model.uft1")).unwrap());
    let (ma, mb) = (json(d.join("a/manifest.json")), json(d.join("b/manifest.json")));
    assert_eq!(ma["inputs"], mb["inputs"]);
    assert_eq!(ma["config"], mb["config"]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = workspace();
    let d = dir.path();
    ok(&train(d, "run", &["--epochs", "2", "--d-g", "6", "--dev-metric", "pair-only"]));
    let m = json(d.join("run/manifest.json"));
    assert_eq!(m["config"]["train"]["epochs"], 2);
    assert_eq!(m["config"]["model"]["decoder"]["d_g"], 6);
    assert_eq!(m["config"]["train"]["dev_metric"], "pair_only");
    assert_eq!(json(d.join("run/train_log.json"))["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn gold_against_itself_scores_one_and_disjoint_scores_zero() {
    let dir = workspace();
    let d = dir.path();
    let report: Value =
        serde_json::from_str(&ok(&ecgraph(d, &["eval", "--pred", "data.json", "--gold", "data.json", "--json"]))).unwrap();
    for mode in ["strict", "proportional", "pair_only"] {
        assert_eq!(weighted_f1(&report, mode), 1.0);
    }

    // every predicted pair points at a cause no gold pair uses
    let gold = parse_dataset(&fs::read(d.join("data.json")).unwrap(), ParseMode::Train).unwrap();
    let mut wrong = gold.conversations.clone();
    for c in &mut wrong {
        let golds = c.pairs.clone();
        c.pairs.retain_mut(|p| {
            match (1..=p.effect).find(|&k| golds.iter().all(|g| g.cause != k || g.effect != p.effect)) {
                Some(k) => {
                    p.cause = k;
                    p.span = None;
                    true
                }
                None => false,
            }
        });
    }
    assert!(wrong.iter().any(|c| !c.pairs.is_empty()));
    fs::write(d.join("wrong.json"), to_json_string(&wrong)).unwrap();
    let out = ecgraph(d, &["eval", "--pred", "wrong.json", "--gold", "data.json", "--mode", "pair-only", "--json"]);
    let report: Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(weighted_f1(&report, "pair_only"), 0.0);
}

#[test]
fn unknown_conversations_are_a_user_error() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("preds.json"), r#"[{"conversation_ID": "ghost", "emotion-cause_pairs": []}]"#).unwrap();
    let err = user_error(&ecgraph(d, &["eval", "--pred", "preds.json", "--gold", "data.json"]));
    assert!(err.contains("ghost"), "{err}");
}

#[test]
fn precomputed_mode_needs_its_feature_file() {
    let dir = workspace();
    let d = dir.path();
    let err = user_error(&train(d, "run", &["--mode", "precomputed"]));
    assert!(err.contains("--text-features"), "{err}");

    let err = user_error(&train(d, "run", &["--mode", "precomputed", "--text-features", "absent.uft1"]));
    assert!(err.contains("absent.uft1"), "{err}");
    assert!(!d.join("run").exists());
}

#[test]
fn extra_modalities_are_picked_up_from_their_files() {
    let dir = workspace();
    let d = dir.path();
    let data = parse_dataset(&fs::read(d.join("data.json")).unwrap(), ParseMode::Train).unwrap();
    stub_features(&data, 5, 3, 1).save(&d.join("visual.uft1")).unwrap();
    ok(&train(d, "run", &["--visual-features", "visual.uft1"]));
    let m = json(d.join("run/manifest.json"));
    assert_eq!(m["config"]["model"]["encoder"]["visual"]["d_in"], 5);

    // the checkpoint remembers the modality, so predicting without it fails cleanly
    let err = user_error(&ecgraph(
        d,
        &["predict", "--checkpoint", "run/model.uft1", "--data", "data.json", "--out", "p.json"],
    ));
    assert!(err.contains("visual") || err.contains("features"), "{err}");
    ok(&ecgraph(
        d,
        &[
            "predict", "--checkpoint", "run/model.uft1", "--data", "data.json", "--out", "p.json",
            "--visual-features", "visual.uft1",
        ],
    ));
}

#[test]
fn bad_checkpoints_are_user_errors() {
    let dir = workspace();
    let d = dir.path();
    let predict = |ckpt: &str| ecgraph(d, &["predict", "--checkpoint", ckpt, "--data", "data.json", "--out", "p.json"]);
    user_error(&predict("missing.uft1"));
    user_error(&predict("data.json"));

    ok(&train(d, "run", &[]));
    let bytes = fs::read(d.join("run/model.uft1")).unwrap();
    fs::write(d.join("run/model.uft1"), &bytes[..bytes.len() / 2]).unwrap();
    let err = user_error(&predict("run/model.uft1"));
    assert!(err.contains("truncated"), "{err}");
    assert!(!d.join("p.json").exists());
}

#[test]
fn malformed_config_is_a_user_error() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    let err = user_error(&ecgraph(d, &["train", "--data", "data.json", "--config", "bad.toml", "--out", "run"]));
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn inspect_describes_checkpoints_features_and_datasets() {
    let dir = workspace();
    let d = dir.path();
    ok(&train(d, "run", &[]));
    let text = ok(&ecgraph(d, &["inspect", "run/model.uft1"]));
    assert!(text.contains("decoder.arc") && text.contains("total parameters"), "{text}");

    let v: Value = serde_json::from_str(&ok(&ecgraph(d, &["inspect", "run/model.uft1", "--json"]))).unwrap();
    assert_eq!(v["kind"], "checkpoint");
    let params = v["parameters"].as_array().unwrap();
    let total: u64 = params.iter().map(|p| p["count"].as_u64().unwrap()).sum();
    assert_eq!(v["total"].as_u64().unwrap(), total);
    let arc = params.iter().find(|p| p["name"] == "decoder.arc").unwrap();
    assert_eq!(arc["shape"], serde_json::json!([8, 8]));

    let mut f = FeatureFile::new(3);
    f.push("a", vec![0.0; 6]).unwrap();
    f.save(&d.join("f.uft1")).unwrap();
    let v: Value = serde_json::from_str(&ok(&ecgraph(d, &["inspect", "f.uft1", "--json"]))).unwrap();
    assert_eq!(v["kind"], "features");
    assert_eq!(v["dim"], 3);
    assert_eq!(v["records"][0][1], 2);

    let v: Value = serde_json::from_str(&ok(&ecgraph(d, &["inspect", "data.json", "--json"]))).unwrap();
    assert_eq!(v["kind"], "dataset");
    assert_eq!(v["conversations"], 10);
}
