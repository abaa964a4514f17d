use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pathvl::data_io::read_checkpoint;
use pathvl::pipeline::{run, PipelineConfig};
use serde_json::Value;

fn pathvl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathvl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn pathvl")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pathvl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// synth, train-coca, embed, classify-slide, eval.
fn chain(dir: &Path, seed: &str) {
    ok(dir, &["--seed", seed, "synth", "--out", "d"]);
    ok(
        dir,
        &[
            "--seed",
            seed,
            "train-coca",
            "--pairs",
            "d/train.jsonl",
            "--out",
            "m.ckpt",
        ],
    );
    ok(
        dir,
        &[
            "embed",
            "--model",
            "m.ckpt",
            "--slides",
            "d/slides.jsonl",
            "--out",
            "emb",
        ],
    );
    ok(
        dir,
        &[
            "classify-slide",
            "--model",
            "m.ckpt",
            "--manifests",
            "emb/manifests.jsonl",
            "--out",
            "slides.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "--seed",
            seed,
            "eval",
            "--predictions",
            "slides.jsonl",
            "--out",
            "eval.json",
        ],
    );
}

#[test]
fn quick_chain_matches_library_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    chain(dir, "3");

    let lib = run(&PipelineConfig::quick(3)).unwrap();
    let ck = read_checkpoint(dir.join("m.ckpt")).unwrap();
    assert_eq!(ck, lib.model.to_checkpoint(&lib.vocab));

    let rows = jsonl(&dir.join("slides.jsonl"));
    let n = rows.len() as f64;
    for &(k, acc) in &lib.report.slide_per_k {
        let hits = rows
            .iter()
            .filter(|r| {
                let at = r["per_k"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .find(|p| p["k"] == k)
                    .unwrap();
                at["predicted"] == r["truth"]
            })
            .count();
        assert_eq!(hits as f64 / n, acc, "K = {k}");
    }
    assert_eq!(rows[0]["k"], lib.report.slide_best_k);

    let eval: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    let acc = eval["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["metric"] == "accuracy")
        .unwrap();
    assert_eq!(acc["ci"]["point"], lib.report.slide_accuracy);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    chain(a.path(), "5");
    chain(b.path(), "5");
    for file in [
        "d/train.jsonl",
        "d/train/train_00000.ppm",
        "d/slides.jsonl",
        "m.ckpt",
        "m.ckpt.log.jsonl",
        "emb/manifests.jsonl",
        "emb/slide_000.emb",
        "slides.jsonl",
        "eval.json",
    ] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("eval.json.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["command"], "eval");
    assert_eq!(meta["seed"], 5);
}

#[test]
fn single_tile_slide_predicts_the_same_for_every_k() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "d"]);
    ok(
        dir,
        &["train-coca", "--pairs", "d/train.jsonl", "--out", "m.ckpt"],
    );
    ok(
        dir,
        &[
            "embed",
            "--model",
            "m.ckpt",
            "--slides",
            "d/slides.jsonl",
            "--out",
            "emb",
        ],
    );
    let mut manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("emb/slide_000.json")).unwrap()).unwrap();
    let coords = manifest["tile_coords"].as_array().unwrap()[..1].to_vec();
    manifest["tile_coords"] = Value::Array(coords);
    let store = pathvl::data_io::read_store(dir.join("emb/slide_000.emb")).unwrap();
    let one = pathvl::data_io::EmbeddingStore::from_vectors(
        store.dim(),
        &[pathvl::Embedding::normalize(store.get_f64(0)).unwrap()],
        None,
        true,
    )
    .unwrap();
    pathvl::data_io::write_store(&one, dir.join("one.emb")).unwrap();
    manifest["store_path"] = Value::String("one.emb".into());
    fs::write(dir.join("one.jsonl"), format!("{manifest}\n")).unwrap();
    ok(
        dir,
        &[
            "classify-slide",
            "--model",
            "m.ckpt",
            "--manifests",
            "one.jsonl",
            "--out",
            "p.jsonl",
        ],
    );
    let row = &jsonl(&dir.join("p.jsonl"))[0];
    let per_k = row["per_k"].as_array().unwrap();
    assert_eq!(per_k.len(), 5);
    assert!(per_k
        .iter()
        .all(|p| p["predicted"] == per_k[0]["predicted"]));
}

#[test]
fn errors_exit_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("empty.jsonl"), "").unwrap();
    let out = pathvl(dir, &["eval", "--predictions", "empty.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = pathvl(dir, &["eval", "--predictions", "missing.jsonl"]);
    assert!(!out.status.success());
    let out = pathvl(dir, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pathvl(dir, &["--workers", "0", "synth", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(pathvl(dir, &["--help"]).status.success());
}

#[test]
fn eval_and_stats_on_hand_written_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let write = |name: &str, preds: &[usize]| {
        let truth = [0, 0, 1, 1, 2, 2];
        let text: String = truth
            .iter()
            .zip(preds)
            .enumerate()
            .map(|(i, (t, p))| format!("{{\"id\":\"{i}\",\"truth\":{t},\"predicted\":{p}}}\n"))
            .collect();
        fs::write(dir.join(name), text).unwrap();
    };
    write("a.jsonl", &[0, 0, 1, 1, 2, 2]);
    write("b.jsonl", &[0, 1, 1, 0, 2, 0]);
    let text = ok(
        dir,
        &["eval", "--predictions", "b.jsonl", "--bootstrap", "50"],
    );
    assert!(text.contains("balanced_accuracy"));
    let eval: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("b.jsonl.eval.json")).unwrap()).unwrap();
    let bacc = &eval["metrics"].as_array().unwrap()[1];
    assert_eq!(bacc["metric"], "balanced_accuracy");
    assert!((bacc["ci"]["point"].as_f64().unwrap() - 0.5).abs() < 1e-12);

    ok(
        dir,
        &[
            "stats", "--a", "a.jsonl", "--b", "b.jsonl", "--metric", "accuracy", "--out", "s.json",
        ],
    );
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.join("s.json")).unwrap()).unwrap();
    assert!((s["a"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((s["b"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let p = s["test"]["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
}
