use std::time::{Duration, Instant};

use super::config::{ModelEntry, ModelKind, ModelParams};
use super::HarnessError;
use crate::baselines::{fit_mean, MeanModel, NaiveKind, NaiveModel};
use crate::bkt::{fit_bkt, BktModel};
use crate::dataset::{Dataset, StudentSequence};
use crate::logreg::{fit_best_lr, LrModel};
use crate::neural::{
    fit_dkt_traced, fit_sakt_traced, read_checkpoint, write_checkpoint, Checkpoint, DktModel, SaktModel,
};
use crate::prediction::{Prediction, SequencePredictor};

/// A fitted non-LLM model.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Naive(NaiveModel),
    Bkt(BktModel),
    BestLr(LrModel),
    Dkt(DktModel),
    Sakt(SaktModel),
}

/// Outcome of one fit: the model and whether the budget cut it short.
#[derive(Debug)]
pub struct Fitted {
    pub model: TrainedModel,
    pub truncated: bool,
    pub elapsed: Duration,
}

pub fn fit_model(entry: &ModelEntry, train: &Dataset, seed: u64) -> Result<Fitted, HarnessError> {
    let start = Instant::now();
    let deadline = entry.budget_secs.map(|s| start + Duration::from_secs_f64(s));
    let model_err = |e: String| HarnessError::Model(format!("{}: {e}", entry.kind.slug()));
    let naive = |kind| -> Result<TrainedModel, HarnessError> {
        let mean = fit_mean(train).map_err(|e| model_err(e.to_string()))?;
        Ok(TrainedModel::Naive(NaiveModel { kind, mean }))
    };
    let mut truncated = false;
    let model = match (entry.kind, entry.parsed(seed)?) {
        (ModelKind::Mean, _) => naive(NaiveKind::Mean)?,
        (ModelKind::Nap, _) => naive(NaiveKind::Nap)?,
        (ModelKind::NapSkills, _) => naive(NaiveKind::NapSkills)?,
        (_, ModelParams::Bkt(mut cfg)) => {
            cfg.deadline = deadline;
            TrainedModel::Bkt(fit_bkt(train, &cfg).map_err(|e| model_err(e.to_string()))?)
        }
        (_, ModelParams::BestLr(mut cfg)) => {
            cfg.deadline = deadline;
            TrainedModel::BestLr(fit_best_lr(train, &cfg).map_err(|e| model_err(e.to_string()))?)
        }
        (_, ModelParams::Dkt(mut cfg)) => {
            cfg.deadline = deadline;
            let (m, report) = fit_dkt_traced(train, &cfg).map_err(|e| model_err(e.to_string()))?;
            truncated = report.truncated;
            TrainedModel::Dkt(m)
        }
        (_, ModelParams::Sakt(mut cfg)) => {
            cfg.deadline = deadline;
            let (m, report) = fit_sakt_traced(train, &cfg).map_err(|e| model_err(e.to_string()))?;
            truncated = report.truncated;
            TrainedModel::Sakt(m)
        }
        (kind, _) => {
            return Err(HarnessError::Config(format!(
                "{} is served by an LLM backend and has nothing to train",
                kind.slug()
            )))
        }
    };
    let elapsed = start.elapsed();
    truncated |= deadline.is_some_and(|d| Instant::now() > d);
    Ok(Fitted {
        model,
        truncated,
        elapsed,
    })
}

const HEADER: &str = "kt-model";

impl TrainedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TrainedModel::Naive(m) => match m.kind {
                NaiveKind::Mean => ModelKind::Mean.slug(),
                NaiveKind::Nap => ModelKind::Nap.slug(),
                NaiveKind::NapSkills => ModelKind::NapSkills.slug(),
            },
            TrainedModel::Bkt(_) => ModelKind::Bkt.slug(),
            TrainedModel::BestLr(_) => ModelKind::BestLr.slug(),
            TrainedModel::Dkt(_) => ModelKind::Dkt.slug(),
            TrainedModel::Sakt(_) => ModelKind::Sakt.slug(),
        }
    }

    /// `kt-model <kind>` followed by the model's own text format.
    pub fn to_text(&self) -> String {
        let body = match self {
            TrainedModel::Naive(m) => format!("train_mean={}\n", m.mean.train_mean),
            TrainedModel::Bkt(m) => m.to_text(),
            TrainedModel::BestLr(m) => m.to_text(),
            TrainedModel::Dkt(m) => checkpoint_text(Checkpoint::Dkt(m.clone())),
            TrainedModel::Sakt(m) => checkpoint_text(Checkpoint::Sakt(m.clone())),
        };
        format!("{HEADER} {}\n{body}", self.kind_name())
    }

    pub fn from_text(text: &str) -> Result<TrainedModel, HarnessError> {
        let (first, body) = text.split_once('\n').unwrap_or((text, ""));
        let kind = first
            .strip_prefix(HEADER)
            .map(str::trim)
            .and_then(ModelKind::from_slug)
            .ok_or_else(|| HarnessError::Model(format!("not a saved model: `{first}`")))?;
        let bad = |e: String| HarnessError::Model(format!("{}: {e}", kind.slug()));
        let naive = |k| -> Result<TrainedModel, HarnessError> {
            let v = body
                .trim()
                .strip_prefix("train_mean=")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| bad("missing train_mean".into()))?;
            Ok(TrainedModel::Naive(NaiveModel {
                kind: k,
                mean: MeanModel { train_mean: v },
            }))
        };
        match kind {
            ModelKind::Mean => naive(NaiveKind::Mean),
            ModelKind::Nap => naive(NaiveKind::Nap),
            ModelKind::NapSkills => naive(NaiveKind::NapSkills),
            ModelKind::Bkt => Ok(TrainedModel::Bkt(
                BktModel::from_text(body).map_err(|e| bad(e.to_string()))?,
            )),
            ModelKind::BestLr => Ok(TrainedModel::BestLr(
                LrModel::from_text(body).map_err(|e| bad(e.to_string()))?,
            )),
            ModelKind::Dkt | ModelKind::Sakt => {
                match read_checkpoint(body.as_bytes()).map_err(|e| bad(e.to_string()))? {
                    Checkpoint::Dkt(m) if kind == ModelKind::Dkt => Ok(TrainedModel::Dkt(m)),
                    Checkpoint::Sakt(m) if kind == ModelKind::Sakt => Ok(TrainedModel::Sakt(m)),
                    _ => Err(bad("checkpoint kind does not match header".into())),
                }
            }
            other => Err(bad(format!("{} models are not saved locally", other.slug()))),
        }
    }
}

fn checkpoint_text(c: Checkpoint) -> String {
    let mut buf = Vec::new();
    write_checkpoint(&c, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("checkpoints are ASCII")
}

impl SequencePredictor for TrainedModel {
    fn predict_sequence(&self, seq: &StudentSequence) -> Vec<Prediction> {
        match self {
            TrainedModel::Naive(m) => m.predict_sequence(seq),
            TrainedModel::Bkt(m) => m.predict_sequence(seq),
            TrainedModel::BestLr(m) => m.predict_sequence(seq),
            TrainedModel::Dkt(m) => m.predict_sequence(seq),
            TrainedModel::Sakt(m) => m.predict_sequence(seq),
        }
    }
}
