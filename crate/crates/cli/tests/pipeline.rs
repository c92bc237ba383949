use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use dialsum_cli::manifest::{sha256_file, RunManifest, MANIFEST_FILE};
use dialsum_cli::pipeline::{self, EvaluationReport, Layout, PredictionRow, Task};
use dialsum_cli::{run, Cli, CliError, Config};
use dialsum_core::corpus::{ProcessedExample, SectionHeader};
use dialsum_core::hpo::{read_trial_log, SearchSpace};

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 7
workdir = {workdir:?}

[data]
synthetic = true
n_examples = 30
n_test_examples = 6
synthetic_pool = 200
vocab_size = 400
k_folds = 3
{extra}
[classifier.arch]
name = "classifier"
d_model = 16
n_heads = 2
n_layers_enc = 1
d_ff = 32
max_positions = 128

[classifier.train]
epochs = 2
batch_size = 8

[classifier.lora]
r = 4
alpha = 16.0
dropout_p = 0.0
target_projections = ["query", "value"]

[[summarizer.architectures]]
name = "a"
d_model = 16
n_heads = 2
n_layers_enc = 1
n_layers_dec = 1
d_ff = 32
max_positions = 128

[[summarizer.architectures]]
name = "b"
d_model = 8
n_heads = 2
n_layers_enc = 1
n_layers_dec = 1
d_ff = 16
max_positions = 128

[summarizer.train]
epochs = 2
batch_size = 8

[summarizer.lora]
r = 4
alpha = 16.0
dropout_p = 0.0
target_projections = ["query", "value"]

[decode]
max_target_len = 10
min_target_len = 2

[tune]
n_trials = 3
max_val_examples = 1
"#,
        workdir = dir.join("work"),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn cli(config: &Path, args: &[&str]) -> Result<(), CliError> {
    let mut full = vec!["dialsum".to_string()];
    full.push(args[0].to_string());
    full.push("--config".into());
    full.push(config.to_string_lossy().into_owned());
    full.extend(args[1..].iter().map(|s| s.to_string()));
    full.push("--deterministic".into());
    run(Cli::try_parse_from(full).unwrap())
}

fn load(config: &Path) -> Config {
    Config::load(config).unwrap()
}

fn read_rows<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn prepare_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = "n_examples = 200\n";
    let text = |d: &Path| std::fs::read_to_string(tiny_config(d, "")).unwrap().replace("n_examples = 30\n", extra);
    for d in [a.path(), b.path()] {
        let t = text(d);
        std::fs::write(d.join("config.toml"), t).unwrap();
        cli(&d.join("config.toml"), &["prepare"]).unwrap();
    }
    let la = Layout::new(&load(&a.path().join("config.toml")));
    let lb = Layout::new(&load(&b.path().join("config.toml")));
    for (x, y) in [(la.pool(), lb.pool()), (la.vocab(), lb.vocab()), (la.folds(), lb.folds()), (la.test(), lb.test())] {
        assert_eq!(sha256_file(&x).unwrap(), sha256_file(&y).unwrap());
    }
    let n = std::fs::read_to_string(la.pool()).unwrap().lines().count();
    assert_eq!(n, 200);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let no_data = std::fs::read_to_string(&cfg).unwrap().replace("synthetic = true", "synthetic = false");
    let bad = dir.path().join("nodata.toml");
    std::fs::write(&bad, no_data).unwrap();
    let bin = env!("CARGO_BIN_EXE_dialsum");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();

    let out = status(&["prepare", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.path"));

    let out = status(&["train", "--config", cfg.to_str().unwrap(), "--task", "classify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dialsum prepare"));

    assert_eq!(status(&["frobnicate"]).status.code(), Some(1));

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"x\", \"dialogue\": \"hi\", \"section_header\": \"NOPE\", \"section_text\": \"t\"}\n").unwrap();
    let real = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("synthetic = true", &format!("synthetic = false\npath = {broken:?}"));
    let real_cfg = dir.path().join("real.toml");
    std::fs::write(&real_cfg, real).unwrap();
    let out = status(&["prepare", "--config", real_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NOPE"));

    assert_eq!(status(&["prepare", "--config", cfg.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn training_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "");
    cli(&cfg_path, &["prepare"]).unwrap();
    cli(&cfg_path, &["train", "--task", "classify", "--fold", "all"]).unwrap();
    let cfg = load(&cfg_path);
    let layout = Layout::new(&cfg);
    let ckpt_dir = layout.checkpoint_dir(Task::Classify, "classifier", pipeline::Mode::Lora);
    let ckpts: Vec<_> = files_under(&ckpt_dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).collect();
    assert_eq!(ckpts.len(), 3);

    cli(&cfg_path, &["train", "--task", "classify", "--fold", "0", "--mode", "full"]).unwrap();
    let summary = |mode| -> pipeline::TrainSummary {
        serde_json::from_str(&std::fs::read_to_string(layout.train_summary(Task::Classify, "classifier", mode, 0)).unwrap())
            .unwrap()
    };
    let (lora, full) = (summary(pipeline::Mode::Lora), summary(pipeline::Mode::Full));
    assert!(lora.params.trainable < full.params.trainable);
    assert_eq!(full.params.trainable, full.params.total);
    let curve = std::fs::read_to_string(layout.curve(Task::Classify, "classifier", pipeline::Mode::Lora, 0)).unwrap();
    assert_eq!(curve.lines().count(), 2);

    // same seeds in a fresh workdir give identical checkpoints
    let other = tempfile::tempdir().unwrap();
    let other_cfg = tiny_config(other.path(), "");
    cli(&other_cfg, &["prepare"]).unwrap();
    cli(&other_cfg, &["train", "--task", "classify", "--fold", "1"]).unwrap();
    let other_layout = Layout::new(&load(&other_cfg));
    let a = layout.checkpoint(Task::Classify, "classifier", pipeline::Mode::Lora, 1);
    let b = other_layout.checkpoint(Task::Classify, "classifier", pipeline::Mode::Lora, 1);
    assert_eq!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());

    // rerunning a completed stage is a no-op
    let before = std::fs::metadata(&a).unwrap().modified().unwrap();
    let outcomes = pipeline::train_stage(
        &cfg,
        &pipeline::TrainRequest {
            task: Task::Classify,
            fold: Some(1),
            mode: pipeline::Mode::Lora,
            arch: None,
        },
    )
    .unwrap();
    assert!(outcomes.iter().all(|o| o.skipped));
    assert_eq!(std::fs::metadata(&a).unwrap().modified().unwrap(), before);

    assert!(matches!(
        cli(&cfg_path, &["train", "--task", "classify", "--fold", "3"]),
        Err(CliError::Usage(_))
    ));
}

#[test]
fn tuning_predicting_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "");
    cli(&cfg_path, &["prepare"]).unwrap();
    let cfg = load(&cfg_path);
    let layout = Layout::new(&cfg);

    assert!(matches!(cli(&cfg_path, &["tune"]), Err(CliError::Usage(_))));
    cli(&cfg_path, &["train", "--task", "classify"]).unwrap();
    cli(&cfg_path, &["train", "--task", "summarize"]).unwrap();

    // predicting before tuning falls back to the configured beam
    cli(&cfg_path, &["predict", "--task", "summarize", "--run", "a"]).unwrap();
    let rows: Vec<PredictionRow> = read_rows(&layout.predictions(Task::Summarize, "a-lora"));
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].audit.as_ref().unwrap()["models"].as_array().unwrap().len(), 3);

    cli(&cfg_path, &["tune", "--n-trials", "1"]).unwrap();
    let (header, trials) = read_trial_log(&layout.trial_log()).unwrap();
    assert_eq!(header.space, SearchSpace::beam_search());
    assert_eq!(trials.len(), 1);
    let best: pipeline::BestBeam = serde_json::from_str(&std::fs::read_to_string(layout.best_beam()).unwrap()).unwrap();
    assert_eq!(best.trial, 0);
    assert_eq!(Some(best.objective), trials[0].objective);

    // interrupted study: cut the log at trial 20, then resume to 50
    cli(&cfg_path, &["tune", "--n-trials", "20"]).unwrap();
    let text = std::fs::read_to_string(layout.trial_log()).unwrap();
    assert_eq!(text.lines().count(), 21);
    cli(&cfg_path, &["tune", "--n-trials", "50"]).unwrap();
    let (_, trials) = read_trial_log(&layout.trial_log()).unwrap();
    assert_eq!(trials.len(), 50);
    assert!(trials.iter().enumerate().all(|(i, t)| t.trial == i));
    let resumed = std::fs::read_to_string(layout.trial_log()).unwrap();
    for (a, b) in text.lines().skip(1).zip(resumed.lines().skip(1)) {
        assert_eq!(a, b);
    }

    cli(&cfg_path, &["predict", "--task", "classify", "--audit"]).unwrap();
    let rows: Vec<PredictionRow> = read_rows(&layout.predictions(Task::Classify, "lora"));
    for r in &rows {
        let audit = r.audit.as_ref().unwrap();
        assert_eq!(audit["per_model_logits"].as_array().unwrap().len(), 3);
        assert_eq!(audit["mean_logits"].as_array().unwrap().len(), SectionHeader::all().len());
        assert!(SectionHeader::from_code(&r.output).is_some());
    }

    let run3 = layout.predictions(Task::Summarize, "all-lora");
    cli(&cfg_path, &["predict", "--task", "summarize"]).unwrap();
    let rows: Vec<PredictionRow> = read_rows(&run3);
    for r in &rows {
        let audit = r.audit.as_ref().unwrap();
        assert_eq!(audit["models"].as_array().unwrap().len(), 6);
        assert_eq!(audit["selection"]["candidates"].as_array().unwrap().len(), 6);
    }
    let first = std::fs::read(&run3).unwrap();
    std::fs::remove_file(&run3).unwrap();
    cli(&cfg_path, &["predict", "--task", "summarize"]).unwrap();
    assert_eq!(std::fs::read(&run3).unwrap(), first);

    cli(&cfg_path, &["evaluate", "--task", "summarize", "--predictions", run3.to_str().unwrap()]).unwrap();
    cli(&cfg_path, &["report"]).unwrap();
    let txt = std::fs::read_to_string(layout.reports().join("lora_vs_full.txt")).unwrap();
    assert!(txt.contains("LoRA-Score") && txt.contains("n/a"));

    // every file in the workdir is listed in the manifest
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(layout.root.join(MANIFEST_FILE)).unwrap()).unwrap();
    let listed: Vec<PathBuf> = manifest.artifacts().into_iter().map(|p| layout.root.join(p)).collect();
    for f in files_under(&layout.root) {
        if f.file_name().unwrap() != MANIFEST_FILE {
            assert!(listed.contains(&f), "orphan artifact {}", f.display());
        }
    }
}

fn gold(n: usize) -> Vec<ProcessedExample> {
    (0..n)
        .map(|i| ProcessedExample {
            id: format!("g{i}"),
            classifier_input: "x".into(),
            summarizer_input: "x".into(),
            target_summary: format!("the patient reports pain number {i} ."),
            header: SectionHeader::from_class_id(i % 5).unwrap(),
        })
        .collect()
}

#[test]
fn evaluation_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny_config(dir.path(), ""));
    let gold = gold(200);

    let perfect: Vec<PredictionRow> = gold
        .iter()
        .map(|g| PredictionRow {
            id: g.id.clone(),
            output: g.target_summary.clone(),
            audit: None,
        })
        .collect();
    let EvaluationReport::Summarize(r) = pipeline::evaluate_rows(&cfg, Task::Summarize, &perfect, &gold).unwrap() else {
        panic!("wrong report kind");
    };
    assert!((r.summary.aggregate - 1.0).abs() < 1e-12);
    let table = pipeline::render_evaluation(&EvaluationReport::Summarize(r));
    let head = table.lines().next().unwrap();
    let (r1, sim, agg) = (head.find("ROUGE-1").unwrap(), head.find("similarity-F1").unwrap(), head.find("aggregate").unwrap());
    assert!(r1 < sim && sim < agg);
    assert!(table.contains("BLEURT: not computed"));

    let headers: Vec<PredictionRow> = gold
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let class = if i < 147 { g.header.class_id() } else { (g.header.class_id() + 1) % 20 };
            PredictionRow {
                id: g.id.clone(),
                output: SectionHeader::from_class_id(class).unwrap().code().into(),
                audit: None,
            }
        })
        .collect();
    let EvaluationReport::Classify(c) = pipeline::evaluate_rows(&cfg, Task::Classify, &headers, &gold).unwrap() else {
        panic!("wrong report kind");
    };
    assert_eq!(c.correct, 147);
    assert!((c.accuracy - 0.735).abs() < 1e-12);

    let mut shifted = perfect.clone();
    for (i, row) in shifted.iter_mut().enumerate().take(8) {
        row.id = format!("zz{i}");
    }
    let err = pipeline::evaluate_rows(&cfg, Task::Summarize, &shifted, &gold).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::Data(_)));
    assert!(msg.contains("16 offenders"));
    assert!((0..5).all(|i| msg.contains(&format!("g{i} (no prediction)"))));
    assert!(!msg.contains("g5 ") && !msg.contains("zz"));
}
