//! Pipeline stages. Each stage reads artifacts from the work directory,
//! records its outputs in the run manifest and is skipped when nothing
//! changed since its last successful run.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dialsum_core::corpus::{
    generate_synthetic_corpus, load_dataset, make_folds, preprocess, write_jsonl, DataFormat, FoldManifest,
    ProcessedExample, SectionHeader, Triplet,
};
use dialsum_core::decode::{summarize, BeamConfig};
use dialsum_core::ensemble::{ensemble_summarize, predict_header, EnsembleSelection, SimilarityBackend};
use dialsum_core::hpo::{
    append_trial, read_trial_log, tune_decoding, write_trial_log_header, TrialLogHeader, TrialRecord, TuneSet,
};
use dialsum_core::metrics::{
    accuracy, metric_report, score_summary, summarize_scores, MetricReport, ModelEmbedder, RandomProjectionEmbedder,
};
use dialsum_core::model::{load_checkpoint, save_checkpoint, train, CheckpointMeta, Model, ParamCount, TrainExample};
use dialsum_core::seed::derive_seed;
use dialsum_core::tokenizer::{Vocab, CLASSIFIER_BUDGET, SOURCE_BUDGET, TARGET_BUDGET};
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, Config, EnsembleBackend};
use crate::error::CliError;
use crate::manifest::{sha256_file, RunManifest, Stage};

pub const CLASSIFIER_ARCH: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Summarize,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Summarize => "summarize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lora,
    Full,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lora => "lora",
            Mode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    /// Zeroes wall-clock fields so reruns give byte-identical artifacts.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

/// Workdir layout.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &Config) -> Self {
        Layout { root: cfg.workdir.clone() }
    }
    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }
    pub fn pool(&self) -> PathBuf {
        self.prepared().join("examples.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.prepared().join("test.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.prepared().join("vocab.json")
    }
    pub fn folds(&self) -> PathBuf {
        self.prepared().join("folds.json")
    }
    pub fn checkpoint_dir(&self, task: Task, arch: &str, mode: Mode) -> PathBuf {
        self.root.join("checkpoints").join(task.name()).join(arch).join(mode.name())
    }
    pub fn checkpoint(&self, task: Task, arch: &str, mode: Mode, fold: usize) -> PathBuf {
        self.checkpoint_dir(task, arch, mode).join(format!("fold{fold}.ckpt"))
    }
    pub fn curve(&self, task: Task, arch: &str, mode: Mode, fold: usize) -> PathBuf {
        self.checkpoint_dir(task, arch, mode).join(format!("fold{fold}.curve.jsonl"))
    }
    pub fn train_summary(&self, task: Task, arch: &str, mode: Mode, fold: usize) -> PathBuf {
        self.checkpoint_dir(task, arch, mode).join(format!("fold{fold}.summary.json"))
    }
    pub fn trial_log(&self) -> PathBuf {
        self.root.join("tune").join("trials.jsonl")
    }
    pub fn best_beam(&self) -> PathBuf {
        self.root.join("tune").join("best_beam.json")
    }
    pub fn predictions(&self, task: Task, run: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{}-{run}.jsonl", task.name()))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn missing(path: &Path, hint: &str) -> CliError {
    CliError::Usage(format!("{} not found; {hint}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_jsonl(path, rows)?;
    Ok(())
}

fn manifest(cfg: &Config) -> Result<RunManifest, CliError> {
    RunManifest::load_or_new(&cfg.workdir, serde_json::to_value(cfg)?, cfg.seed)
}

/// Runs `body` unless the manifest shows `stage` is current.
fn run_stage(
    cfg: &Config,
    stage: Stage,
    body: impl FnOnce() -> Result<Vec<PathBuf>, CliError>,
) -> Result<StageOutcome, CliError> {
    let mut m = manifest(cfg)?;
    if m.is_current(&cfg.workdir, &stage.name, &stage.input_hash) {
        log::info!("{}: up to date", stage.name);
        let outputs = m.stages[&stage.name].outputs.keys().map(|p| cfg.workdir.join(p)).collect();
        return Ok(StageOutcome { skipped: true, outputs });
    }
    log::info!("{}: running", stage.name);
    match body() {
        Ok(outputs) => {
            stage.finish(&mut m, &cfg.workdir, &outputs)?;
            Ok(StageOutcome { skipped: false, outputs })
        }
        Err(e) => {
            stage.fail(&mut m, &cfg.workdir)?;
            Err(e)
        }
    }
}

fn check_unique_ids(triplets: &[Triplet]) -> Result<(), CliError> {
    let mut seen = BTreeSet::new();
    for t in triplets {
        t.validate().map_err(|e| CliError::Data(e.to_string()))?;
        if !seen.insert(t.id.as_str()) {
            return Err(CliError::Data(format!("duplicate example id {}", t.id)));
        }
    }
    Ok(())
}

pub fn prepare(cfg: &Config) -> Result<StageOutcome, CliError> {
    let d = &cfg.data;
    let inputs: Vec<PathBuf> = if d.synthetic {
        Vec::new()
    } else {
        let path = d
            .path
            .clone()
            .ok_or_else(|| CliError::Usage("no dataset: set data.path or data.synthetic = true".into()))?;
        std::iter::once(path).chain(d.test_path.clone()).collect()
    };
    let params = serde_json::json!({"data": d, "seed": cfg.seed});
    let stage = Stage::new("prepare", &params, &inputs, cfg.seed)?;
    let layout = Layout::new(cfg);
    run_stage(cfg, stage, || {
        let (pool, test) = if d.synthetic {
            let pool = generate_synthetic_corpus(d.n_examples, derive_seed(cfg.seed, "data"), d.synthetic_pool);
            let mut test = generate_synthetic_corpus(d.n_test_examples, derive_seed(cfg.seed, "test-data"), d.synthetic_pool);
            for t in &mut test {
                t.id = format!("test-{}", t.id);
            }
            (pool, Some(test))
        } else {
            let load = |p: &Path| load_dataset(p, DataFormat::from_path(p));
            let pool = load(&inputs[0])?;
            let test = d.test_path.as_deref().map(load).transpose()?;
            (pool, test)
        };
        check_unique_ids(&pool)?;
        if let Some(t) = &test {
            check_unique_ids(t)?;
        }
        let processed: Vec<ProcessedExample> = pool.iter().map(preprocess).collect();
        let texts: Vec<&str> = processed
            .iter()
            .flat_map(|p| [p.classifier_input.as_str(), p.summarizer_input.as_str(), p.target_summary.as_str()])
            .collect();
        let vocab = Vocab::build(&texts, d.vocab_size)?;
        let folds = make_folds(&pool, d.k_folds, derive_seed(cfg.seed, "folds"))?.to_manifest(&pool);

        std::fs::create_dir_all(layout.prepared())?;
        write_rows(&layout.pool(), &processed)?;
        vocab.save(&layout.vocab())?;
        write_json(&layout.folds(), &folds)?;
        let mut outputs = vec![layout.pool(), layout.vocab(), layout.folds()];
        if let Some(test) = test {
            let rows: Vec<ProcessedExample> = test.iter().map(preprocess).collect();
            write_rows(&layout.test(), &rows)?;
            outputs.push(layout.test());
        }
        Ok(outputs)
    })
}

/// Prepared corpus loaded back from the workdir.
pub struct Prepared {
    pub examples: Vec<ProcessedExample>,
    pub by_id: HashMap<String, usize>,
    pub vocab: Vocab,
    pub folds: FoldManifest,
}

impl Prepared {
    pub fn load(cfg: &Config) -> Result<Self, CliError> {
        let layout = Layout::new(cfg);
        let hint = "run `dialsum prepare --config <path>` first";
        for p in [layout.pool(), layout.vocab(), layout.folds()] {
            if !p.exists() {
                return Err(missing(&p, hint));
            }
        }
        let examples: Vec<ProcessedExample> = read_jsonl(&layout.pool())?;
        let by_id = examples.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Ok(Prepared {
            examples,
            by_id,
            vocab: Vocab::load(&layout.vocab())?,
            folds: read_json(&layout.folds())?,
        })
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&ProcessedExample>, CliError> {
        ids.iter()
            .map(|id| {
                self.by_id
                    .get(id)
                    .map(|&i| &self.examples[i])
                    .ok_or_else(|| CliError::Data(format!("fold manifest references unknown id {id}")))
            })
            .collect()
    }

    fn input_paths(cfg: &Config) -> Vec<PathBuf> {
        let l = Layout::new(cfg);
        vec![l.pool(), l.vocab(), l.folds()]
    }
}

pub fn train_example(task: Task, vocab: &Vocab, ex: &ProcessedExample, max_positions: usize) -> TrainExample {
    match task {
        Task::Classify => TrainExample::Classify {
            input: vocab.encode(&ex.classifier_input, CLASSIFIER_BUDGET.min(max_positions), true).ids,
            label: ex.header.class_id(),
        },
        Task::Summarize => TrainExample::Seq2Seq {
            src: vocab.encode(&ex.summarizer_input, SOURCE_BUDGET.min(max_positions), true).ids,
            // room for the appended EOS and the leading BOS
            tgt: vocab.encode(&ex.target_summary, (TARGET_BUDGET - 1).min(max_positions - 1), false).ids,
        },
    }
}

/// Fresh model for one fold; LoRA and full fine-tuning start from the same
/// weights.
pub fn init_fold_model(cfg: &Config, task: Task, arch: &ArchConfig, fold: usize, vocab_len: usize) -> Result<Model, CliError> {
    let n_classes = match task {
        Task::Classify => SectionHeader::all().len(),
        Task::Summarize => 0,
    };
    let seed = derive_seed(cfg.seed, &format!("init/{}/{}/fold{fold}", task.name(), arch.name));
    Ok(Model::new(arch.model_config(vocab_len, n_classes, seed))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: Task,
    pub arch: String,
    pub mode: Mode,
    pub fold: usize,
    pub params: ParamCount,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub optimizer_steps: usize,
    pub n_train: usize,
    pub n_val: usize,
}

pub struct TrainRequest<'a> {
    pub task: Task,
    /// `None` trains every fold.
    pub fold: Option<usize>,
    pub mode: Mode,
    /// Summarizer architecture; `None` trains all of them.
    pub arch: Option<&'a str>,
}

pub fn train_stage(cfg: &Config, req: &TrainRequest<'_>) -> Result<Vec<StageOutcome>, CliError> {
    let prepared = Prepared::load(cfg)?;
    let layout = Layout::new(cfg);
    let k = prepared.folds.k;
    let folds: Vec<usize> = match req.fold {
        Some(f) if f >= k => return Err(CliError::Usage(format!("fold {f} out of range for k = {k}"))),
        Some(f) => vec![f],
        None => (0..k).collect(),
    };
    let archs: Vec<&ArchConfig> = match (req.task, req.arch) {
        (Task::Classify, _) => vec![&cfg.classifier.arch],
        (Task::Summarize, Some(name)) => vec![cfg.arch(name)?],
        (Task::Summarize, None) => cfg.summarizer.architectures.iter().collect(),
    };
    let (train_cfg, lora) = match req.task {
        Task::Classify => (&cfg.classifier.train, &cfg.classifier.lora),
        Task::Summarize => (&cfg.summarizer.train, &cfg.summarizer.lora),
    };
    let vocab_hash = sha256_file(&layout.vocab())?;

    let mut outcomes = Vec::new();
    for arch in archs {
        for &fold in &folds {
            let name = format!("train/{}/{}/{}/fold{fold}", req.task.name(), arch.name, req.mode.name());
            let label = name.clone();
            let params = serde_json::json!({
                "arch": arch, "train": train_cfg, "lora": lora, "mode": req.mode, "seed": cfg.seed,
            });
            let stage = Stage::new(name, &params, &Prepared::input_paths(cfg), cfg.seed)?;
            let prepared = &prepared;
            let layout = &layout;
            let vocab_hash = vocab_hash.clone();
            outcomes.push(run_stage(cfg, stage, move || {
                let entry = &prepared.folds.folds[fold];
                let to_examples = |ids: &[String]| -> Result<Vec<TrainExample>, CliError> {
                    Ok(prepared
                        .select(ids)?
                        .into_iter()
                        .map(|e| train_example(req.task, &prepared.vocab, e, arch.max_positions))
                        .collect())
                };
                let train_set = to_examples(&entry.train_ids)?;
                let val_set = to_examples(&entry.val_ids)?;
                let mut model = init_fold_model(cfg, req.task, arch, fold, prepared.vocab.len())?;
                if req.mode == Mode::Lora {
                    model.attach_lora(lora)?;
                }
                let mut tc = train_cfg.clone();
                tc.seed = derive_seed(cfg.seed, &label);
                let started = std::time::Instant::now();
                let report = train(&mut model, &train_set, &val_set, &tc)?;
                log::info!(
                    "{label}: best epoch {} val {:?} in {:.1}s",
                    report.best_epoch,
                    report.best_val_loss,
                    started.elapsed().as_secs_f64()
                );
                let meta = CheckpointMeta {
                    best_epoch: Some(report.best_epoch),
                    best_val_loss: report.best_val_loss,
                    vocab: Some(vocab_hash),
                    task: Some(req.task.name().into()),
                };
                let ckpt = layout.checkpoint(req.task, &arch.name, req.mode, fold);
                ensure_parent(&ckpt)?;
                save_checkpoint(&model, &meta, &ckpt)?;
                let curve = layout.curve(req.task, &arch.name, req.mode, fold);
                write_rows(&curve, &report.history)?;
                let summary = TrainSummary {
                    task: req.task,
                    arch: arch.name.clone(),
                    mode: req.mode,
                    fold,
                    params: model.count_parameters(),
                    best_epoch: report.best_epoch,
                    best_val_loss: report.best_val_loss,
                    stopped_early: report.stopped_early,
                    optimizer_steps: report.optimizer_steps,
                    n_train: train_set.len(),
                    n_val: val_set.len(),
                };
                let summary_path = layout.train_summary(req.task, &arch.name, req.mode, fold);
                write_json(&summary_path, &summary)?;
                Ok(vec![ckpt, curve, summary_path])
            })?);
        }
    }
    Ok(outcomes)
}

/// Which summarizer architectures an ensemble draws on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunSpec {
    /// Every architecture, every fold.
    All,
    /// Folds of a single architecture.
    Arch(String),
}

impl RunSpec {
    pub fn parse(s: &str) -> RunSpec {
        if s == "all" {
            RunSpec::All
        } else {
            RunSpec::Arch(s.to_string())
        }
    }

    pub fn label(&self) -> &str {
        match self {
            RunSpec::All => "all",
            RunSpec::Arch(a) => a,
        }
    }

    pub fn archs<'a>(&self, cfg: &'a Config) -> Result<Vec<&'a ArchConfig>, CliError> {
        match self {
            RunSpec::All => Ok(cfg.summarizer.architectures.iter().collect()),
            RunSpec::Arch(a) => Ok(vec![cfg.arch(a)?]),
        }
    }
}

/// (arch, fold, path) of every checkpoint a run needs, in a fixed order.
fn run_checkpoints(cfg: &Config, task: Task, run: &RunSpec, mode: Mode) -> Result<Vec<(String, usize, PathBuf)>, CliError> {
    let layout = Layout::new(cfg);
    let archs: Vec<String> = match task {
        Task::Classify => vec![CLASSIFIER_ARCH.to_string()],
        Task::Summarize => run.archs(cfg)?.into_iter().map(|a| a.name.clone()).collect(),
    };
    let mut out = Vec::new();
    for arch in archs {
        for fold in 0..cfg.data.k_folds {
            let p = layout.checkpoint(task, &arch, mode, fold);
            if !p.exists() {
                return Err(missing(
                    &p,
                    &format!("run `dialsum train --task {} --mode {}` first", task.name(), mode.name()),
                ));
            }
            out.push((arch.clone(), fold, p));
        }
    }
    Ok(out)
}

fn load_models(paths: &[(String, usize, PathBuf)]) -> Result<Vec<Model>, CliError> {
    paths.iter().map(|(_, _, p)| Ok(load_checkpoint::<f32>(p)?.0)).collect()
}

fn scoring_embedder(cfg: &Config) -> RandomProjectionEmbedder {
    RandomProjectionEmbedder {
        dim: cfg.metrics.embedding_dim,
        seed: cfg.metrics.embedding_seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestBeam {
    pub beam: BeamConfig,
    pub trial: usize,
    pub objective: f64,
    pub n_trials: usize,
}

pub struct TuneRequest {
    pub n_trials: usize,
    pub mode: Mode,
    pub run: RunSpec,
}

pub fn tune_stage(cfg: &Config, req: &TuneRequest, opts: Options) -> Result<StageOutcome, CliError> {
    let prepared = Prepared::load(cfg)?;
    let layout = Layout::new(cfg);
    let ckpts = run_checkpoints(cfg, Task::Summarize, &req.run, req.mode)?;
    let mut inputs = Prepared::input_paths(cfg);
    inputs.extend(ckpts.iter().map(|(_, _, p)| p.clone()));
    let params = serde_json::json!({
        "tune": cfg.tune, "decode": cfg.decode, "n_trials": req.n_trials, "run": req.run.label(), "mode": req.mode,
        "metrics": cfg.metrics,
    });
    let stage = Stage::new("tune", &params, &inputs, cfg.tune.tpe.seed)?;
    run_stage(cfg, stage, || {
        let models = load_models(&ckpts)?;
        let val: Vec<Vec<ProcessedExample>> = ckpts
            .iter()
            .map(|(_, fold, _)| {
                let mut ids = prepared.folds.folds[*fold].val_ids.clone();
                if let Some(cap) = cfg.tune.max_val_examples {
                    ids.truncate(cap);
                }
                Ok(prepared.select(&ids)?.into_iter().cloned().collect())
            })
            .collect::<Result<_, CliError>>()?;
        let sets: Vec<TuneSet<'_, f32>> = models
            .iter()
            .zip(&val)
            .map(|(model, examples)| TuneSet { model, examples })
            .collect();

        let log_path = layout.trial_log();
        ensure_parent(&log_path)?;
        let header = TrialLogHeader::new(&cfg.tune.space, &cfg.tune.tpe);
        let mut initial: Vec<TrialRecord> = Vec::new();
        if log_path.exists() {
            match read_trial_log(&log_path) {
                Ok((h, rows)) if h.space == header.space && h.tpe == header.tpe => initial = rows,
                _ => log::warn!("{}: incompatible trial log, starting over", log_path.display()),
            }
        }
        initial.truncate(req.n_trials);
        if !initial.is_empty() {
            log::info!("resuming study at trial {}", initial.len());
        }
        write_trial_log_header(&log_path, &header)?;
        for r in &initial {
            append_trial(&log_path, r)?;
        }
        let outcome = tune_decoding(
            &sets,
            &prepared.vocab,
            &scoring_embedder(cfg),
            &cfg.decode,
            &cfg.tune.space,
            req.n_trials,
            &cfg.tune.tpe,
            initial,
            opts.deterministic,
            |r| {
                log::info!("trial {}: {:?}", r.trial, r.objective);
                append_trial(&log_path, r)
            },
        )?;
        let best = BestBeam {
            beam: outcome.best,
            trial: outcome.study.best.trial,
            objective: outcome.study.best.objective.unwrap_or(f64::NAN),
            n_trials: outcome.study.history.len(),
        };
        write_json(&layout.best_beam(), &best)?;
        Ok(vec![log_path, layout.best_beam()])
    })
}

/// Tuned beam settings, or the configured fallback with a warning.
pub fn resolve_beam(cfg: &Config) -> Result<BeamConfig, CliError> {
    let path = Layout::new(cfg).best_beam();
    if path.exists() {
        Ok(read_json::<BestBeam>(&path)?.beam)
    } else {
        log::warn!("no tuned decoding config at {}; using the default beam settings", path.display());
        Ok(cfg.decode.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryAudit {
    pub models: Vec<String>,
    pub selection: EnsembleSelection,
}

pub struct PredictRequest {
    pub task: Task,
    pub run: RunSpec,
    pub mode: Mode,
    pub audit: bool,
    /// Triplet file to predict; defaults to the prepared test split.
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

fn load_targets(cfg: &Config, input: Option<&Path>) -> Result<(Vec<ProcessedExample>, PathBuf), CliError> {
    match input {
        Some(p) => {
            let triplets = load_dataset(p, DataFormat::from_path(p))?;
            check_unique_ids(&triplets)?;
            Ok((triplets.iter().map(preprocess).collect(), p.to_path_buf()))
        }
        None => {
            let p = Layout::new(cfg).test();
            if !p.exists() {
                return Err(missing(&p, "configure data.test_path (or synthetic data) and rerun prepare, or pass --input"));
            }
            Ok((read_jsonl(&p)?, p))
        }
    }
}

pub fn predict_stage(cfg: &Config, req: &PredictRequest) -> Result<StageOutcome, CliError> {
    let layout = Layout::new(cfg);
    let prepared_vocab = layout.vocab();
    if !prepared_vocab.exists() {
        return Err(missing(&prepared_vocab, "run `dialsum prepare --config <path>` first"));
    }
    let (examples, input_path) = load_targets(cfg, req.input.as_deref())?;
    let ckpts = run_checkpoints(cfg, req.task, &req.run, req.mode)?;
    let beam = match req.task {
        Task::Summarize => Some(resolve_beam(cfg)?),
        Task::Classify => None,
    };
    let run_label = match req.task {
        Task::Classify => req.mode.name().to_string(),
        Task::Summarize => format!("{}-{}", req.run.label(), req.mode.name()),
    };
    let out = req.output.clone().unwrap_or_else(|| layout.predictions(req.task, &run_label));
    let mut inputs = vec![input_path, prepared_vocab.clone()];
    inputs.extend(ckpts.iter().map(|(_, _, p)| p.clone()));
    let params = serde_json::json!({
        "task": req.task, "run": req.run.label(), "mode": req.mode, "audit": req.audit, "beam": beam,
        "backend": cfg.metrics.ensemble_backend, "output": out,
    });
    let stage = Stage::new(format!("predict/{}/{run_label}", req.task.name()), &params, &inputs, cfg.seed)?;
    run_stage(cfg, stage, || {
        let vocab = Vocab::load(&prepared_vocab)?;
        let models = load_models(&ckpts)?;
        let refs: Vec<&Model> = models.iter().collect();
        let names: Vec<String> = ckpts.iter().map(|(a, f, _)| format!("{a}/fold{f}")).collect();
        let mut rows = Vec::with_capacity(examples.len());
        for ex in &examples {
            let row = match req.task {
                Task::Classify => {
                    let p = predict_header(&refs, &vocab, &ex.classifier_input)?;
                    PredictionRow {
                        id: ex.id.clone(),
                        output: p.header.code().to_string(),
                        audit: req
                            .audit
                            .then(|| serde_json::json!({"models": names, "per_model_logits": p.per_model_logits, "mean_logits": p.mean_logits})),
                    }
                }
                Task::Summarize => {
                    let beam = beam.as_ref().expect("summarize has a beam config");
                    let embedder = ModelEmbedder { model: refs[0], vocab: &vocab };
                    let backend = match cfg.metrics.ensemble_backend {
                        EnsembleBackend::Embedding => SimilarityBackend::Embedding(&embedder),
                        EnsembleBackend::Tfidf => SimilarityBackend::Tfidf,
                    };
                    let sel = ensemble_summarize(&refs, &vocab, ex, beam, backend)?;
                    PredictionRow {
                        id: ex.id.clone(),
                        output: sel.chosen_text().to_string(),
                        audit: Some(serde_json::to_value(SummaryAudit {
                            models: names.clone(),
                            selection: sel,
                        })?),
                    }
                }
            };
            rows.push(row);
        }
        write_rows(&out, &rows)?;
        Ok(vec![out.clone()])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub majority_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EvaluationReport {
    Classify(ClassificationReport),
    Summarize(MetricReport),
}

/// Pairs predictions with gold rows by id; errors name the first offenders.
pub fn align<'a>(
    predictions: &'a [PredictionRow],
    gold: &'a [ProcessedExample],
) -> Result<Vec<(&'a PredictionRow, &'a ProcessedExample)>, CliError> {
    let pred: HashMap<&str, &PredictionRow> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let mut offenders: Vec<String> = gold
        .iter()
        .filter(|g| !pred.contains_key(g.id.as_str()))
        .map(|g| format!("{} (no prediction)", g.id))
        .collect();
    offenders.extend(
        predictions
            .iter()
            .filter(|p| !gold_ids.contains(p.id.as_str()))
            .map(|p| format!("{} (not in gold)", p.id)),
    );
    if pred.len() != predictions.len() {
        offenders.push("duplicate prediction ids".into());
    }
    if !offenders.is_empty() {
        let n = offenders.len();
        offenders.truncate(5);
        return Err(CliError::Data(format!(
            "prediction/gold id mismatch ({n} offenders): {}",
            offenders.join(", ")
        )));
    }
    Ok(gold.iter().map(|g| (pred[g.id.as_str()], g)).collect())
}

pub fn evaluate_rows(
    cfg: &Config,
    task: Task,
    predictions: &[PredictionRow],
    gold: &[ProcessedExample],
) -> Result<EvaluationReport, CliError> {
    let pairs = align(predictions, gold)?;
    match task {
        Task::Classify => {
            let mut pred = Vec::with_capacity(pairs.len());
            for (p, _) in &pairs {
                let h = SectionHeader::from_code(&p.output)
                    .ok_or_else(|| CliError::Data(format!("{}: unknown section header {}", p.id, p.output)))?;
                pred.push(h.class_id());
            }
            let gold_ids: Vec<usize> = pairs.iter().map(|(_, g)| g.header.class_id()).collect();
            let correct = pred.iter().zip(&gold_ids).filter(|(a, b)| a == b).count();
            let mut counts = HashMap::new();
            gold_ids.iter().for_each(|c| *counts.entry(c).or_insert(0usize) += 1);
            let majority = counts.values().copied().max().unwrap_or(0);
            Ok(EvaluationReport::Classify(ClassificationReport {
                n: pred.len(),
                correct,
                accuracy: accuracy(&pred, &gold_ids)?,
                majority_share: if pred.is_empty() { 0.0 } else { majority as f64 / pred.len() as f64 },
            }))
        }
        Task::Summarize => {
            let emb = scoring_embedder(cfg);
            let rows = pairs
                .iter()
                .map(|(p, g)| score_summary(&g.id, &p.output, &g.target_summary, &emb))
                .collect();
            Ok(EvaluationReport::Summarize(metric_report(rows)))
        }
    }
}

pub fn render_evaluation(report: &EvaluationReport) -> String {
    let mut s = String::new();
    match report {
        EvaluationReport::Classify(c) => {
            let _ = writeln!(s, "{:<10} {:>8} {:>8}", "n", "correct", "accuracy");
            let _ = writeln!(s, "{:<10} {:>8} {:>8.4}", c.n, c.correct, c.accuracy);
            let _ = writeln!(s, "majority-class share: {:.4}", c.majority_share);
        }
        EvaluationReport::Summarize(r) => {
            let c = &r.summary;
            let _ = writeln!(s, "{:<6} {:>8} {:>14} {:>10}", "n", "ROUGE-1", "similarity-F1", "aggregate");
            let _ = writeln!(s, "{:<6} {:>8.4} {:>14.4} {:>10.4}", c.n, c.rouge1_f1, c.similarity_f1, c.aggregate);
            let _ = writeln!(s, "ROUGE-2: {:.4}", c.rouge2_f1);
            let _ = writeln!(s, "BLEURT: not computed");
            for n in &r.notes {
                let _ = writeln!(s, "note: {n}");
            }
        }
    }
    s
}

pub struct EvaluateRequest {
    pub task: Task,
    pub predictions: PathBuf,
    /// Gold rows; defaults to the prepared test split.
    pub gold: Option<PathBuf>,
}

pub fn evaluate_stage(cfg: &Config, req: &EvaluateRequest) -> Result<(StageOutcome, EvaluationReport), CliError> {
    let (gold, gold_path) = load_targets(cfg, req.gold.as_deref())?;
    let stem = req
        .predictions
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| req.task.name().into());
    let json_path = Layout::new(cfg).reports().join(format!("{stem}.metrics.json"));
    let txt_path = Layout::new(cfg).reports().join(format!("{stem}.metrics.txt"));
    let params = serde_json::json!({"task": req.task, "metrics": cfg.metrics, "stem": stem});
    let stage = Stage::new(
        format!("evaluate/{stem}"),
        &params,
        &[req.predictions.clone(), gold_path],
        cfg.seed,
    )?;
    let predictions: Vec<PredictionRow> = read_jsonl(&req.predictions)?;
    let report = evaluate_rows(cfg, req.task, &predictions, &gold)?;
    let outcome = run_stage(cfg, stage, || {
        write_json(&json_path, &report)?;
        std::fs::write(&txt_path, render_evaluation(&report))?;
        Ok(vec![json_path.clone(), txt_path.clone()])
    })?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub aggregate: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arch: String,
    pub lora: Option<ArmScore>,
    pub full: Option<ArmScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub beam: BeamConfig,
    pub notes: Vec<String>,
}

/// Mean task aggregate of one model over `examples`.
pub fn model_aggregate(
    cfg: &Config,
    model: &Model,
    vocab: &Vocab,
    examples: &[&ProcessedExample],
    beam: &BeamConfig,
) -> Result<f64, CliError> {
    let emb = scoring_embedder(cfg);
    let rows = examples
        .iter()
        .map(|ex| {
            let out = summarize(model, vocab, &ex.summarizer_input, beam)?;
            Ok(score_summary(&ex.id, &out, &ex.target_summary, &emb))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(summarize_scores(&rows).aggregate)
}

fn arm_score(cfg: &Config, prepared: &Prepared, arch: &str, mode: Mode, beam: &BeamConfig) -> Result<Option<ArmScore>, CliError> {
    let Ok(ckpts) = run_checkpoints(cfg, Task::Summarize, &RunSpec::Arch(arch.into()), mode) else {
        return Ok(None);
    };
    let mut total = 0.0;
    let mut n = 0usize;
    let mut params = ParamCount { total: 0, trainable: 0 };
    for (_, fold, path) in &ckpts {
        let (model, _) = load_checkpoint::<f32>(path)?;
        params = model.count_parameters();
        let test = prepared.select(&prepared.folds.folds[*fold].test_ids)?;
        total += model_aggregate(cfg, &model, &prepared.vocab, &test, beam)? * test.len() as f64;
        n += test.len();
    }
    Ok(Some(ArmScore {
        aggregate: if n == 0 { 0.0 } else { total / n as f64 },
        trainable_params: params.trainable,
        total_params: params.total,
    }))
}

pub fn render_comparison(r: &ComparisonReport) -> String {
    let cell = |a: &Option<ArmScore>| a.as_ref().map_or("n/a".to_string(), |s| format!("{:.4}", s.aggregate));
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>12} {:>12}", "Model", "LoRA-Score", "Full-Score");
    for row in &r.rows {
        let _ = writeln!(s, "{:<20} {:>12} {:>12}", row.arch, cell(&row.lora), cell(&row.full));
    }
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

/// LoRA versus full fine-tuning, one row per summarizer architecture, scored
/// on each fold's held-out test part.
pub fn report_stage(cfg: &Config) -> Result<(StageOutcome, ComparisonReport), CliError> {
    let prepared = Prepared::load(cfg)?;
    let layout = Layout::new(cfg);
    let beam = resolve_beam(cfg)?;
    let mut inputs = Prepared::input_paths(cfg);
    for arch in &cfg.summarizer.architectures {
        for mode in [Mode::Lora, Mode::Full] {
            for fold in 0..cfg.data.k_folds {
                let p = layout.checkpoint(Task::Summarize, &arch.name, mode, fold);
                if p.exists() {
                    inputs.push(p);
                }
            }
        }
    }
    let params = serde_json::json!({"beam": beam, "metrics": cfg.metrics});
    let stage = Stage::new("report", &params, &inputs, cfg.seed)?;
    let json_path = layout.reports().join("lora_vs_full.json");
    let txt_path = layout.reports().join("lora_vs_full.txt");
    let outcome = run_stage(cfg, stage, || {
        let rows = cfg
            .summarizer
            .architectures
            .iter()
            .map(|a| {
                Ok(ComparisonRow {
                    arch: a.name.clone(),
                    lora: arm_score(cfg, &prepared, &a.name, Mode::Lora, &beam)?,
                    full: arm_score(cfg, &prepared, &a.name, Mode::Full, &beam)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let report = ComparisonReport {
            rows,
            beam: beam.clone(),
            notes: desk_notes(),
        };
        write_json(&json_path, &report)?;
        std::fs::write(&txt_path, render_comparison(&report))?;
        Ok(vec![json_path.clone(), txt_path.clone()])
    })?;
    let report: ComparisonReport = read_json(&json_path)?;
    Ok((outcome, report))
}

pub fn desk_notes() -> Vec<String> {
    vec![
        "models are small randomly initialised transformers, not pretrained checkpoints".into(),
        "similarity-F1 is an embedding-matching stand-in for a learned similarity metric".into(),
        "BLEURT: not computed".into(),
    ]
}
