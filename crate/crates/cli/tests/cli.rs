use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metapico_cli::{ModelSpec, RunConfig};
use metapico_core::model::ModelConfig;
use metapico_core::train::{MetaConfig, TrainConfig};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metapico"));
    c.env("METAPICO_LOG", "warn").env_remove("METAPICO_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Last stderr line parsed as the error record.
fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn small_config(dir: &Path, name: &str, rho: f64) -> PathBuf {
    let cfg = json!({
        "model": "desk",
        "train": {"peak_lr": 3e-3, "warmup_steps": 5, "total_steps": 20, "accum_steps": 2, "micro_batch": 4,
                  "checkpoint_every": 10, "log_every": 5, "eval_sequences": 8, "seed": 7},
        "meta": {"rho": rho, "n_ways": 4, "k_shots": 2, "q_queries": 2, "inner_steps": 2, "head_hidden": 16},
        "data": {"synthetic_sequences": 1000, "heldout_sequences": 16, "seed": 3},
        "finetune": {"lr": 1e-2, "max_epochs": 2}
    });
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn schema_keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v["properties"].as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

fn value_keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn schema_matches_the_default_config() {
    let schema: Value =
        serde_json::from_str(&fs::read_to_string(repo().join("schema/run_config.schema.json")).unwrap()).unwrap();
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    assert_eq!(schema_keys(&schema), value_keys(&defaults));
    for section in ["train", "meta", "data", "finetune", "analysis"] {
        let s = &schema["properties"][section];
        assert_eq!(s["additionalProperties"], false, "{section}");
        assert_eq!(schema_keys(s), value_keys(&defaults[section]), "{section}");
        for (key, value) in defaults[section].as_object().unwrap() {
            assert_eq!(&s["properties"][key]["default"], value, "{section}.{key}");
        }
    }
    assert_eq!(schema["properties"]["model"]["default"], defaults["model"]);
    let model_object = &schema["properties"]["model"]["oneOf"][1];
    let model_defaults = serde_json::to_value(ModelConfig::default()).unwrap();
    assert_eq!(schema_keys(model_object), value_keys(&model_defaults));
    for (key, value) in model_defaults.as_object().unwrap() {
        assert_eq!(&model_object["properties"][key]["default"], value, "model.{key}");
    }
    let tiers: Vec<&str> = schema["properties"]["model"]["oneOf"][0]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_str().unwrap())
        .collect();
    assert_eq!(tiers, metapico_core::model::TIER_NAMES);
}

#[test]
fn defaults_and_shipped_configs() {
    let d = RunConfig::default();
    assert_eq!(d.model.resolve().unwrap(), ModelConfig::tier("medium").unwrap());
    assert_eq!((d.train.total_steps, d.train.checkpoint_every, d.train.log_every), (6000, 100, 100));
    assert_eq!((d.train.peak_lr, d.train.warmup_steps, d.train.accum_steps), (3e-4, 2500, 8));
    assert_eq!((d.meta.n_ways, d.meta.k_shots, d.meta.q_queries, d.meta.inner_steps), (32, 4, 2, 10));
    assert_eq!((d.meta.rho, d.meta.inner_lr, d.meta.head_layers, d.meta.head_hidden), (0.5, 1e-3, 4, 128));

    let desk = RunConfig::load(&repo().join("configs/desk.json")).unwrap().resolved().unwrap();
    assert_eq!(desk.model, ModelSpec::Explicit(ModelConfig::desk(256)));
    assert_eq!(desk.train, TrainConfig::desk());
    assert_eq!(desk.meta, MetaConfig::desk());
    let vanilla = RunConfig::load(&repo().join("configs/desk_vanilla.json")).unwrap().resolved().unwrap();
    assert_eq!(vanilla.meta.rho, 0.0);
    assert_eq!(RunConfig { meta: desk.meta.clone(), ..vanilla }, desk);
}

#[test]
fn analyze_t90_on_the_worked_curve() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("metrics.jsonl");
    let lines: Vec<String> = [1.0, 0.5, 0.2, 0.11, 0.1, 0.1]
        .iter()
        .enumerate()
        .map(|(i, v)| json!({"step": i * 100, "train_loss": v}).to_string())
        .collect();
    fs::write(&curve, lines.join("\n")).unwrap();
    assert_eq!(ok(&["analyze", "t90", "--curve", p(&curve)]), "300\n");
    let auc: f64 = ok(&["analyze", "auc", "--curve", p(&curve)]).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let slope: f64 = ok(&["analyze", "slope", "--curve", p(&curve), "--k", "2"]).trim().parse().unwrap();
    assert!((slope - (-0.005)).abs() < 1e-12);
}

#[test]
fn usage_errors_exit_one_with_usage_text() {
    let out = run(&["pretrain", "--config", "x.json", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
    assert_eq!(error_record(&out)["error"], "usage");
    assert_eq!(run(&["transmogrify"]).status.code(), Some(1));
    assert_eq!(run(&["analyze", "t90"]).status.code(), Some(1));
}

#[test]
fn data_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"peak_lr": 1e-3, "learning_rate": 2}}"#).unwrap();
    let out = run(&["pretrain", "--config", p(&bad), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!((rec["error"].as_str(), rec["code"].as_i64()), (Some("data"), Some(2)));
    assert!(rec["reason"].as_str().unwrap().contains("learning_rate"));

    let conll = dir.path().join("broken.conll");
    fs::write(&conll, "si O\nMaria B-PER EXTRA\n").unwrap();
    let out = run(&["analyze", "particle-recall", "--data", p(&conll)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
    assert_eq!(run(&["analyze", "oov", "--data", "missing.conll", "--vocab", "missing.json"]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "hot", 0.0);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["peak_lr"] = json!(1e30);
    v["train"]["warmup_steps"] = json!(0);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = run(&["pretrain", "--config", p(&cfg), "--out", p(&dir.path().join("hot"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out)["error"], "numeric");
}

fn weights(run: &Path, step: &str) -> Vec<u8> {
    fs::read(run.join("checkpoints").join(step).join("weights.bin")).unwrap()
}

#[test]
fn vanilla_and_hybrid_runs_share_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let vanilla = small_config(dir.path(), "vanilla", 0.0);
    let hybrid = small_config(dir.path(), "hybrid", 0.5);
    let root = dir.path().join("runs");
    for cfg in [&vanilla, &hybrid] {
        let out = bin().args(["pretrain", "--config", p(cfg)]).env("METAPICO_OUT", &root).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["step"], 20);
        assert_eq!(summary["checkpoints"], 3);
    }
    let (a, b) = (root.join("vanilla"), root.join("hybrid"));
    for run in [&a, &b] {
        for f in ["config.json", "vocab.json", "metrics.jsonl"] {
            assert!(run.join(f).is_file(), "{}", run.join(f).display());
        }
        let snapshot: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
        assert_eq!(snapshot["model"]["d_model"], 16);
        assert_eq!(snapshot["train"]["seed"], 7);
    }
    // Same seed, same initial weights; the branch mix then separates the runs.
    assert_eq!(weights(&a, "step_000000"), weights(&b, "step_000000"));
    assert_ne!(weights(&a, "step_000020"), weights(&b, "step_000020"));
    assert_eq!(fs::read(a.join("vocab.json")).unwrap(), fs::read(b.join("vocab.json")).unwrap());

    // An occupied run directory is not overwritten.
    let out = bin().args(["pretrain", "--config", p(&vanilla)]).env("METAPICO_OUT", &root).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resumed_runs_match_uninterrupted_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "hybrid", 0.5);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&full)]);
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&split), "--until", "10"]);
    assert!(!split.join("checkpoints/step_000020").exists());
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&split), "--resume"]);
    assert_eq!(weights(&full, "step_000020"), weights(&split, "step_000020"));
    assert_eq!(
        fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(split.join("metrics.jsonl")).unwrap()
    );

    ok(&["pretrain", "--config", p(&cfg), "--out", p(&dir.path().join("ws2")), "--world-size", "2"]);
}

#[test]
fn finetune_eval_sweep_and_analysis_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, "hybrid", 0.5);
    let run_dir = d.join("run");
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&run_dir)]);
    let (train, dialect) = (d.join("data/source.conll"), d.join("data/dialect.conll"));
    ok(&["gen-data", "ner", "--sentences", "120", "--seed", "1", "--out", p(&train)]);
    ok(&[
        "gen-data",
        "ner",
        "--sentences",
        "40",
        "--particle-rate",
        "0.5",
        "--lexicon",
        "dialect",
        "--seed",
        "2",
        "--out",
        p(&dialect),
    ]);

    let ckpt = run_dir.join("checkpoints/step_000020");
    let tagged = d.join("tagged");
    let report: Value = serde_json::from_str(&ok(&[
        "finetune",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&train),
        "--regime",
        "head",
        "--config",
        p(&cfg),
        "--eval",
        p(&dialect),
        "--out",
        p(&tagged),
    ]))
    .unwrap();
    assert!(report["datasets"]["dialect"]["micro"]["f1"].is_number());
    for f in ["tagger.json", "tagger.bin", "report.json", "eval.json", "finetune.json"] {
        assert!(tagged.join(f).is_file(), "{f}");
    }
    let again: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", p(&tagged), "--data", p(&dialect)])).unwrap();
    assert_eq!(again["datasets"], report["datasets"]);
    let out = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&dialect)]);
    assert_eq!(out.status.code(), Some(2), "a pretraining checkpoint is not a tagger");

    let early = d.join("tagged0");
    ok(&[
        "finetune",
        "--checkpoint",
        p(&run_dir.join("checkpoints/step_000000")),
        "--data",
        p(&train),
        "--regime",
        "full",
        "--config",
        p(&cfg),
        "--out",
        p(&early),
    ]);
    let csv = ok(&["analyze", "confidence", "--tagger", p(&early), p(&tagged), "--data", p(&dialect), "--top-n", "3"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("word,checkpoint_step,split,confidence"));
    let steps: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(steps.into_iter().collect::<Vec<_>>(), ["0", "20"]);
    let delta = ok(&["analyze", "delta", "--a", p(&early), "--b", p(&tagged), "--data", p(&dialect)]);
    assert_eq!(delta.lines().next(), Some("sentence,position,word,gold,delta"));
    let tokens: usize = fs::read_to_string(&dialect).unwrap().lines().filter(|l| !l.trim().is_empty()).count();
    assert_eq!(delta.lines().count(), 1 + tokens);
    let self_delta = ok(&["analyze", "delta", "--a", p(&tagged), "--b", p(&tagged), "--data", p(&dialect)]);
    assert!(self_delta.lines().skip(1).all(|l| l.ends_with(",0")), "{self_delta}");

    let per: Value = serde_json::from_str(&ok(&["analyze", "per", "--checkpoint", p(&ckpt)])).unwrap();
    assert_eq!(per.as_object().unwrap().len(), 6);
    assert!(per.as_object().unwrap().values().all(|v| v.as_f64().is_some_and(|x| x > 0.0 && x <= 1.0)));
    let recall: f64 = ok(&["analyze", "particle-recall", "--data", p(&train)]).trim().parse().unwrap();
    assert_eq!(recall, 1.0);
    let oov: f64 = ok(&["analyze", "oov", "--data", p(&dialect), "--vocab", p(&run_dir.join("vocab.json"))])
        .trim()
        .parse()
        .unwrap();
    assert_eq!(oov, 0.0);

    let summary: Value = serde_json::from_str(&ok(&[
        "sweep",
        "--checkpoints",
        p(&run_dir.join("checkpoints")),
        "--data",
        p(&train),
        "--eval",
        p(&dialect),
        "--config",
        p(&cfg),
    ]))
    .unwrap();
    assert_eq!((summary["rows"].as_u64(), summary["failed"].as_u64()), (Some(3), Some(0)));
    let table = run_dir.join("sweep_head_only.csv");
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 1 + 3);
    assert!(run_dir.join("sweep_head_only_report.csv").is_file());
}

#[test]
fn gen_data_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    ok(&["gen-data", "corpus", "--vocab-size", "200", "--sequences", "50", "--seq-len", "9", "--out", p(&out)]);
    let vocab = metapico_core::data::Vocab::load(&out.join("vocab.json")).unwrap();
    assert_eq!(vocab.len(), 200);
    let corpus = metapico_core::data::load_pretokenized(&out.join("corpus.jsonl"), 200, Some(9)).unwrap();
    assert_eq!(corpus.len(), 50);
}
