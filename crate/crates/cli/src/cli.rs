use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::CliError;
use crate::pipeline::{
    self, EvaluateRequest, Layout, Mode, Options, PredictRequest, RunSpec, Task, TrainRequest, TuneRequest,
};

#[derive(Debug, Parser)]
#[command(name = "dialsum", version, about = "Dialogue section classification and summarization pipeline")]
pub struct Cli {
    /// Single-threaded execution with wall-clock fields zeroed.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `workdir`.
    #[arg(long)]
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load or generate data, build the vocabulary and assign folds.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_examples: Option<usize>,
        #[arg(long)]
        k_folds: Option<usize>,
    },
    /// Train one model per fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Task,
        /// Fold index or `all`.
        #[arg(long, default_value = "all")]
        fold: String,
        #[arg(long, value_enum, default_value = "lora")]
        mode: Mode,
        /// Summarizer architecture name; all when omitted.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Search decoding parameters on the validation folds.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_trials: Option<usize>,
        #[arg(long, value_enum, default_value = "lora")]
        mode: Mode,
        /// `all` or a single architecture name.
        #[arg(long, default_value = "all")]
        run: String,
    },
    /// Ensemble predictions over the fold checkpoints.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value = "all")]
        run: String,
        #[arg(long, value_enum, default_value = "lora")]
        mode: Mode,
        /// Include per-model logits in classification rows.
        #[arg(long)]
        audit: bool,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a predictions file against gold rows.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// LoRA versus full fine-tuning table.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = &common.workdir {
        cfg.workdir = w.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = if cli.deterministic { 1 } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let opts = Options {
        deterministic: cli.deterministic,
    };
    pool.install(|| dispatch(cli.command, opts))
}

fn report_outputs(outcome: &pipeline::StageOutcome) {
    let state = if outcome.skipped { "unchanged" } else { "wrote" };
    for p in &outcome.outputs {
        println!("{state} {}", p.display());
    }
}

fn dispatch(command: Command, opts: Options) -> Result<(), CliError> {
    match command {
        Command::Prepare {
            common,
            n_examples,
            k_folds,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = n_examples {
                cfg.data.n_examples = n;
            }
            if let Some(k) = k_folds {
                cfg.data.k_folds = k;
            }
            cfg.validate()?;
            report_outputs(&pipeline::prepare(&cfg)?);
        }
        Command::Train {
            common,
            task,
            fold,
            mode,
            arch,
            epochs,
            lr,
        } => {
            let mut cfg = load(&common)?;
            let tc = match task {
                Task::Classify => &mut cfg.classifier.train,
                Task::Summarize => &mut cfg.summarizer.train,
            };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(l) = lr {
                tc.lr = l;
            }
            cfg.validate()?;
            let fold = match fold.as_str() {
                "all" => None,
                f => Some(
                    f.parse()
                        .map_err(|_| CliError::Usage(format!("--fold expects an index or `all`, got {f}")))?,
                ),
            };
            let req = TrainRequest {
                task,
                fold,
                mode,
                arch: arch.as_deref(),
            };
            for o in pipeline::train_stage(&cfg, &req)? {
                report_outputs(&o);
            }
        }
        Command::Tune {
            common,
            n_trials,
            mode,
            run,
        } => {
            let cfg = load(&common)?;
            let req = TuneRequest {
                n_trials: n_trials.unwrap_or(cfg.tune.n_trials),
                mode,
                run: RunSpec::parse(&run),
            };
            if req.n_trials == 0 {
                return Err(CliError::Usage("--n-trials must be >= 1".into()));
            }
            report_outputs(&pipeline::tune_stage(&cfg, &req, opts)?);
        }
        Command::Predict {
            common,
            task,
            run,
            mode,
            audit,
            input,
            output,
        } => {
            let cfg = load(&common)?;
            let req = PredictRequest {
                task,
                run: RunSpec::parse(&run),
                mode,
                audit,
                input,
                output,
            };
            report_outputs(&pipeline::predict_stage(&cfg, &req)?);
        }
        Command::Evaluate {
            common,
            task,
            predictions,
            gold,
        } => {
            let cfg = load(&common)?;
            let (outcome, report) = pipeline::evaluate_stage(&cfg, &EvaluateRequest { task, predictions, gold })?;
            print!("{}", pipeline::render_evaluation(&report));
            report_outputs(&outcome);
        }
        Command::Report { common } => {
            let cfg = load(&common)?;
            let (outcome, report) = pipeline::report_stage(&cfg)?;
            print!("{}", pipeline::render_comparison(&report));
            report_outputs(&outcome);
            log::info!("artifacts under {}", Layout::new(&cfg).root.display());
        }
    }
    Ok(())
}
