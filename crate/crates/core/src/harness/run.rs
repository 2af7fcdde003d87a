use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use log::info;
use rayon::prelude::*;

use super::config::{BackendKind, ExperimentConfig, LlmConfig, ModelEntry, SplitConfig};
use super::model::fit_model;
use super::table::{emit_table, ResultRow, ResultsTable, TableFormat};
use super::HarnessError;
use crate::dataset::{apply_split, filter_degenerate_students, load_interactions, Dataset, FilterReport, SplitSpec};
use crate::features::sequence_features;
use crate::llm::{predict_many, HttpBackend, LlmBackend, LlmClient, LlmMode, MockBackend, ReplayBackend};
use crate::metrics::{metric_report, MetricReport};
use crate::prediction::SequencePredictor;

/// Filtered train and test halves.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub filter: FilterReport,
}

/// Loads, filters and splits the configured dataset. External split lists
/// lose the users that filtering removed.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, HarnessError> {
    let raw = load_interactions(&cfg.dataset.path, &cfg.dataset.columns)?;
    let (filtered, filter) = filter_degenerate_students(&raw)?;
    let spec = match &cfg.split {
        SplitConfig::External {
            train_users,
            test_users,
        } => SplitSpec::from_files(train_users, test_users)?.without_users(&filter.removed_users),
        SplitConfig::Seeded { train_fraction } => SplitSpec::SeededUserSplit {
            train_fraction: *train_fraction,
            seed: cfg.seed,
        },
    };
    let (train, test) = apply_split(&filtered, &spec)?;
    Ok(PreparedData { train, test, filter })
}

pub fn build_backend(llm: &LlmConfig) -> Result<Box<dyn LlmBackend>, HarnessError> {
    Ok(match llm.backend {
        BackendKind::Mock => Box::new(MockBackend {
            weights: llm.mock_weights,
            accepts: llm.mock_accepts,
        }),
        BackendKind::Replay => {
            let path = llm
                .replay_file
                .as_ref()
                .ok_or_else(|| HarnessError::Config("replay backend needs llm.replay_file".into()))?;
            let file = fs::File::open(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            Box::new(
                ReplayBackend::load(BufReader::new(file))
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?,
            )
        }
        BackendKind::Http => {
            let url = llm
                .base_url
                .as_deref()
                .ok_or_else(|| HarnessError::Config("http backend needs llm.base_url".into()))?;
            Box::new(HttpBackend::from_env(
                url,
                &llm.api_key_env,
                Duration::from_secs(llm.timeout_secs),
            ))
        }
    })
}

/// Predicts every test sequence in order and scores the result.
pub fn evaluate_predictor<P: SequencePredictor + ?Sized>(
    model: &P,
    test: &Dataset,
) -> Result<MetricReport, HarnessError> {
    let mut labels = Vec::with_capacity(test.n_records());
    let mut preds = Vec::with_capacity(test.n_records());
    for seq in &test.sequences {
        labels.extend(seq.labels());
        preds.extend(model.predict_sequence(seq));
    }
    metric_report(&labels, &preds, 0).map_err(|e| HarnessError::Model(e.to_string()))
}

/// Queries the LLM for every test point. Points whose response can't be
/// scored are counted as failures and left out of the metrics; transport
/// errors fail the whole row.
pub fn evaluate_llm(client: &LlmClient<'_>, mode: LlmMode, test: &Dataset) -> Result<MetricReport, HarnessError> {
    let mut labels = Vec::with_capacity(test.n_records());
    let mut points = Vec::with_capacity(test.n_records());
    for seq in &test.sequences {
        labels.extend(seq.labels());
        points.extend(sequence_features(seq));
    }
    let results = predict_many(client, mode, &points).map_err(|e| HarnessError::Model(e.to_string()))?;
    let mut kept_labels = Vec::with_capacity(labels.len());
    let mut preds = Vec::with_capacity(labels.len());
    let mut failures = 0;
    for (label, r) in labels.into_iter().zip(results) {
        match r {
            Ok(p) => {
                kept_labels.push(label);
                preds.push(p);
            }
            Err(e) if e.is_point_failure() => failures += 1,
            Err(e) => return Err(HarnessError::Model(e.to_string())),
        }
    }
    metric_report(&kept_labels, &preds, failures).map_err(|e| HarnessError::Model(e.to_string()))
}

fn run_entry(
    cfg: &ExperimentConfig,
    entry: &ModelEntry,
    data: &PreparedData,
    backend: Option<&dyn LlmBackend>,
) -> ResultRow {
    let start = Instant::now();
    let mut truncated = false;
    let outcome = match entry.kind.llm_mode() {
        Some(mode) => match backend {
            Some(b) => {
                let client = LlmClient::new(b, cfg.llm.client.clone());
                evaluate_llm(&client, mode, &data.test)
            }
            None => Err(HarnessError::Config("no LLM backend available".into())),
        },
        None => fit_model(entry, &data.train, cfg.seed).and_then(|fitted| {
            truncated = fitted.truncated;
            evaluate_predictor(&fitted.model, &data.test)
        }),
    };
    let seconds = start.elapsed().as_secs_f64();
    let over_budget = truncated || entry.budget_secs.is_some_and(|b| seconds > b);
    let outcome = match outcome {
        Ok(_) if over_budget && entry.abort_on_budget => Err(format!(
            "budget of {}s exhausted",
            entry.budget_secs.unwrap_or_default()
        )),
        other => other.map_err(|e| e.to_string()),
    };
    ResultRow {
        kind: entry.kind,
        family: entry.kind.family().into(),
        model: entry.kind.display_name().into(),
        outcome,
        seconds,
        truncated,
    }
}

/// Runs every configured model; one model's failure is recorded in its row
/// and does not stop the others. Data and split errors abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable, HarnessError> {
    cfg.validate()?;
    let backend = if cfg.models.iter().any(|m| m.kind.llm_mode().is_some()) {
        Some(build_backend(&cfg.llm)?)
    } else {
        None
    };
    run_experiment_with_backend(cfg, backend.as_deref())
}

pub fn run_experiment_with_backend(
    cfg: &ExperimentConfig,
    backend: Option<&dyn LlmBackend>,
) -> Result<ResultsTable, HarnessError> {
    cfg.validate()?;
    let mut log = vec![
        format!("dataset={}", cfg.dataset.name),
        format!("seed={}", cfg.seed),
        format!("config_hash={}", cfg.hash()),
    ];
    let data = prepare_data(cfg)?;
    log.extend(data.filter.log_lines().lines().map(str::to_string));
    log.push(format!(
        "split.train_students={} split.test_students={} split.test_points={}",
        data.train.sequences.len(),
        data.test.sequences.len(),
        data.test.n_records()
    ));
    for l in &log {
        info!("{l}");
    }

    let rows: Vec<ResultRow> = if cfg.parallel_models {
        cfg.models
            .par_iter()
            .map(|m| run_entry(cfg, m, &data, backend))
            .collect()
    } else {
        cfg.models.iter().map(|m| run_entry(cfg, m, &data, backend)).collect()
    };
    for r in &rows {
        let status = match &r.outcome {
            Ok(m) => format!("ok auc={} failures={}", m.auc, m.failure_count),
            Err(e) => format!("failed: {e}"),
        };
        let line = format!(
            "model={} seconds={:.3} truncated={} {status}",
            r.kind.slug(),
            r.seconds,
            r.truncated
        );
        info!("{line}");
        log.push(line);
    }

    Ok(ResultsTable {
        dataset: cfg.dataset.name.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        filter: Some(data.filter),
        rows,
        log,
    })
}

/// Writes `results.md`, `results.csv`, `metrics/<model>.json` and `run.log`.
pub fn write_outputs(t: &ResultsTable, dir: &Path) -> std::io::Result<()> {
    let metrics_dir = dir.join("metrics");
    fs::create_dir_all(&metrics_dir)?;
    fs::write(dir.join("results.md"), emit_table(t, TableFormat::Markdown))?;
    fs::write(dir.join("results.csv"), emit_table(t, TableFormat::Csv))?;
    let mut used = std::collections::HashMap::new();
    for row in &t.rows {
        let n = used.entry(row.kind.slug()).or_insert(0usize);
        *n += 1;
        let name = match *n {
            1 => format!("{}.json", row.kind.slug()),
            k => format!("{}-{k}.json", row.kind.slug()),
        };
        let value = match &row.outcome {
            Ok(m) => serde_json::json!({ "model": row.model, "seconds": row.seconds, "metrics": m }),
            Err(e) => serde_json::json!({ "model": row.model, "seconds": row.seconds, "error": e }),
        };
        fs::write(metrics_dir.join(name), serde_json::to_string_pretty(&value)? + "\n")?;
    }
    fs::write(dir.join("run.log"), t.log.join("\n") + "\n")?;
    Ok(())
}
