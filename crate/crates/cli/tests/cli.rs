use std::path::Path;
use std::process::{Command, Output};

fn exemplar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exemplar"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("SCORER_ENDPOINT")
        .output()
        .unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out-dir", dir.to_str().unwrap()];
    args.extend(extra);
    let out = exemplar(&args, dir.parent().unwrap());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_value_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("s"), &[]);
    let out = exemplar(&["train", "-c", "s/config.json", "--delta", "140"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`delta`"));

    std::fs::write(tmp.path().join("bad.json"), r#"{"target": "tgt", "epoch": 3}"#).unwrap();
    let out = exemplar(&["train", "-c", "bad.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = exemplar(&["train", "--target", "zz", "--data-dir", "nowhere"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn select_aux_on_clusters_picks_the_related_bank() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("s"), &["--preset", "clusters", "--clusters", "5"]);
    let out = exemplar(&["select-aux", "-c", "s/config.json"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sel: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("s/out/selection.json")).unwrap()).unwrap();
    assert_eq!(sel["selected"], serde_json::json!(["c1"]));
    assert!(tmp.path().join("s/out/select-aux.manifest.json").exists());
}

#[test]
fn ingest_copies_a_bank_into_the_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("s"), &[]);
    let out = exemplar(
        &[
            "ingest",
            "--input",
            "s/data/rel1.jsonl",
            "--lang",
            "rel1",
            "--embeddings",
            "s/data/rel1.emb",
            "--query-embeddings",
            "s/data/rel1.query.emb",
            "--data-dir",
            "copy",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let read = |p: &str| std::fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("copy/rel1.emb"), read("s/data/rel1.emb"));
    assert_eq!(read("copy/rel1.query.emb"), read("s/data/rel1.query.emb"));
    assert!(tmp.path().join("copy/ingest-rel1.manifest.json").exists());
}

#[test]
fn eval_scores_a_predictions_file() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("pred.jsonl"),
        "{\"query_id\":\"a\",\"hypothesis\":\"the cat sat\",\"reference\":\"the cat sat\"}\n\
         {\"query_id\":\"b\",\"hypothesis\":\"a b\",\"reference\":\"b c\"}\n",
    )
    .unwrap();
    let out = exemplar(&["eval", "--target", "tgt", "--predictions", "pred.jsonl"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["count"], 2);
    assert!((summary["token_f1"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert!((summary["chrf1"].as_f64().unwrap() - 62.5).abs() < 1e-9);
}
