//! `ktbench`: command-line front end for the knowledge-tracing harness.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 model error.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use kt_core::dataset::{filter_degenerate_students, load_interactions, ColumnMapping, SplitSpec};
use kt_core::harness::{
    emit_table, evaluate_predictor, fit_model, prepare_data, run_experiment, run_experiment_with_backend,
    write_outputs, BackendKind, ExperimentConfig, HarnessError, ModelEntry, ModelKind, ResultRow, ResultsTable,
    TableFormat, TrainedModel,
};
use kt_core::llm::{export_finetune_corpus, HttpBackend, MockBackend, PromptTemplate, RecordingBackend};

#[derive(Parser)]
#[command(name = "ktbench", version, about = "Knowledge-tracing benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load an interaction log and report its size.
    Ingest(DataArgs),
    /// Drop all-correct and all-wrong students and report how many went.
    Filter(DataArgs),
    /// Write a seeded user split as two user-list files.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Write the fine-tuning corpus for the training half as JSONL.
    ExportPrompts {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, value_enum, default_value_t = TemplateArg::Minimal)]
        template: TemplateArg,
        /// Keep numbers unsplit in the prompts.
        #[arg(long)]
        no_split_digits: bool,
    },
    /// Fit the configured non-LLM models and save them under `--out`.
    Train(RunArgs),
    /// Score models saved by `train` on the test half.
    Evaluate(RunArgs),
    /// Fit, predict and tabulate every configured model.
    Run(RunArgs),
    /// Run the LLM rows against a live or mock backend and record every
    /// response for later replay.
    ReplayCapture {
        #[command(flatten)]
        common: RunArgs,
        /// Where to write the replay file.
        #[arg(long)]
        replay_file: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for id mappings, filter report or split files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated model slugs, e.g. `mean,bkt,dkt`.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `export-prompts`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Replay,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Minimal,
    Extended,
}

fn data_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Data(format!("{}: {e}", path.display()))
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(p) = &self.dataset {
            cfg.dataset.path = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(b) = self.backend {
            cfg.llm.backend = match b {
                BackendArg::Mock => BackendKind::Mock,
                BackendArg::Replay => BackendKind::Replay,
                BackendArg::Http => BackendKind::Http,
            };
        }
        if let Some(slugs) = &self.models {
            cfg.models = select_models(&cfg.models, slugs)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keeps config entries whose kind is listed, in the listed order; kinds the
/// config doesn't mention get default parameters.
fn select_models(entries: &[ModelEntry], slugs: &[String]) -> Result<Vec<ModelEntry>, HarnessError> {
    slugs
        .iter()
        .map(|s| {
            let kind =
                ModelKind::from_slug(s.trim()).ok_or_else(|| HarnessError::Config(format!("unknown model `{s}`")))?;
            Ok(entries.iter().find(|e| e.kind == kind).cloned().unwrap_or(ModelEntry {
                kind,
                params: Default::default(),
                budget_secs: None,
                abort_on_budget: false,
            }))
        })
        .collect()
}

fn finish(table: &ResultsTable, out: &Path) -> Result<(), HarnessError> {
    write_outputs(table, out).map_err(io_at(out))?;
    print!("{}", emit_table(table, TableFormat::Markdown));
    info!("outputs written to {}", out.display());
    if table.failed_rows() > 0 {
        return Err(HarnessError::Model(format!(
            "{} model row(s) failed",
            table.failed_rows()
        )));
    }
    Ok(())
}

fn model_path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("{}.model", kind.slug()))
}

fn execute(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Ingest(a) => {
            let d = load_interactions(&a.dataset, &ColumnMapping::default())?;
            println!(
                "students={} interactions={} items={} skills={}",
                d.sequences.len(),
                d.n_records(),
                d.n_items(),
                d.n_skills()
            );
            if let Some(out) = a.out {
                d.write_id_mappings(&out).map_err(io_at(&out))?;
            }
        }
        Command::Filter(a) => {
            let d = load_interactions(&a.dataset, &ColumnMapping::default())?;
            let (_, report) = filter_degenerate_students(&d)?;
            print!("{}", report.log_lines());
            if let Some(out) = a.out {
                fs::create_dir_all(&out).map_err(io_at(&out))?;
                fs::write(out.join("filter.log"), report.log_lines()).map_err(io_at(&out))?;
                let removed = report.removed_users.join("\n");
                fs::write(out.join("removed_users.txt"), removed + "\n").map_err(io_at(&out))?;
            }
        }
        Command::Split {
            data,
            seed,
            train_fraction,
        } => {
            let d = load_interactions(&data.dataset, &ColumnMapping::default())?;
            let (kept, _) = filter_degenerate_students(&d)?;
            let spec = SplitSpec::SeededUserSplit { train_fraction, seed };
            let (train, test) = kt_core::dataset::apply_split(&kept, &spec)?;
            let out = data.out.unwrap_or_else(|| PathBuf::from("."));
            SplitSpec::write_files(&train.user_names(), &test.user_names(), &out).map_err(io_at(&out))?;
            println!(
                "train_students={} test_students={}",
                train.sequences.len(),
                test.sequences.len()
            );
        }
        Command::ExportPrompts {
            common,
            template,
            no_split_digits,
        } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg)?;
            let template = match template {
                TemplateArg::Minimal => PromptTemplate::Minimal,
                TemplateArg::Extended => PromptTemplate::Extended,
            };
            let mut opts = cfg.llm.client.prompt;
            opts.split_digits &= !no_split_digits;
            let path = common.out.unwrap_or_else(|| cfg.output_dir.join("corpus.jsonl"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_at(parent))?;
            }
            let file = fs::File::create(&path).map_err(io_at(&path))?;
            let n = export_finetune_corpus(&data.train, template, opts, BufWriter::new(file)).map_err(data_err)?;
            println!("wrote {n} examples to {}", path.display());
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg)?;
            fs::create_dir_all(&cfg.output_dir).map_err(io_at(&cfg.output_dir))?;
            for entry in cfg.models.iter().filter(|m| m.kind.llm_mode().is_none()) {
                let fitted = fit_model(entry, &data.train, cfg.seed)?;
                let path = model_path(&cfg.output_dir, entry.kind);
                fs::write(&path, fitted.model.to_text()).map_err(io_at(&path))?;
                println!(
                    "{} trained in {:.2}s{} -> {}",
                    entry.kind.slug(),
                    fitted.elapsed.as_secs_f64(),
                    if fitted.truncated { " (budget reached)" } else { "" },
                    path.display()
                );
            }
        }
        Command::Evaluate(common) => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg)?;
            let rows = cfg
                .models
                .iter()
                .filter(|m| m.kind.llm_mode().is_none())
                .map(|entry| {
                    let start = std::time::Instant::now();
                    let path = model_path(&cfg.output_dir, entry.kind);
                    let outcome = fs::read_to_string(&path)
                        .map_err(io_at(&path))
                        .and_then(|t| TrainedModel::from_text(&t))
                        .and_then(|m| evaluate_predictor(&m, &data.test))
                        .map_err(|e| e.to_string());
                    ResultRow {
                        kind: entry.kind,
                        family: entry.kind.family().into(),
                        model: entry.kind.display_name().into(),
                        outcome,
                        seconds: start.elapsed().as_secs_f64(),
                        truncated: false,
                    }
                })
                .collect();
            let table = ResultsTable {
                dataset: cfg.dataset.name.clone(),
                seed: cfg.seed,
                config_hash: cfg.hash(),
                filter: Some(data.filter),
                rows,
                log: vec![format!("evaluate config_hash={}", cfg.hash())],
            };
            finish(&table, &cfg.output_dir)?;
        }
        Command::Run(common) => {
            let cfg = common.load()?;
            let table = run_experiment(&cfg)?;
            finish(&table, &cfg.output_dir)?;
        }
        Command::ReplayCapture { common, replay_file } => {
            let cfg = common.load()?;
            let llm = &cfg.llm;
            let (table, recorded) = match llm.backend {
                BackendKind::Mock => {
                    let rec = RecordingBackend::new(MockBackend {
                        weights: llm.mock_weights,
                        accepts: llm.mock_accepts,
                    });
                    (
                        run_experiment_with_backend(&cfg, Some(&rec))?,
                        save_replay(&rec, &replay_file)?,
                    )
                }
                BackendKind::Http => {
                    let url = llm.base_url.as_deref().unwrap_or_default();
                    let rec = RecordingBackend::new(HttpBackend::from_env(
                        url,
                        &llm.api_key_env,
                        Duration::from_secs(llm.timeout_secs),
                    ));
                    (
                        run_experiment_with_backend(&cfg, Some(&rec))?,
                        save_replay(&rec, &replay_file)?,
                    )
                }
                BackendKind::Replay => {
                    return Err(HarnessError::Config(
                        "replay-capture needs a mock or http backend".into(),
                    ))
                }
            };
            println!("recorded {recorded} responses to {}", replay_file.display());
            finish(&table, &cfg.output_dir)?;
        }
    }
    Ok(())
}

fn save_replay<B: kt_core::llm::LlmBackend>(rec: &RecordingBackend<B>, path: &Path) -> Result<usize, HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    let file = fs::File::create(path).map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    let n = rec.save(&mut w).map_err(data_err)?;
    w.flush().map_err(io_at(path))?;
    Ok(n)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ktbench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
