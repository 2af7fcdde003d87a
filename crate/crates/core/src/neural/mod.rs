//! Desk-scale DKT (LSTM) and SAKT (causal self-attention) models.
//!
//! Both models share a flat [`ParamSet`] container, Adam with global
//! gradient-norm clipping, a text checkpoint format and a finite-difference
//! gradient checker. Everything runs in `f64` on the CPU, sequentially, so
//! a config and seed fully determine the trained weights.

mod checkpoint;
mod dkt;
mod gradcheck;
mod optim;
mod sakt;

use std::time::Instant;

use log::{debug, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{Dataset, StudentSequence};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use dkt::{dkt_predict_sequence, encode_dkt_input, fit_dkt, fit_dkt_traced, DktConfig, DktModel};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{clip_grad_norm, Adam};
pub use sakt::{fit_sakt, fit_sakt_traced, sakt_predict_sequence, SaktConfig, SaktModel};

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("skill vocabulary is empty")]
    EmptyVocab,
    #[error("skill {skill} is outside a vocabulary of {n_skills}")]
    UnknownSkill { skill: usize, n_skills: usize },
    #[error("non-finite loss in epoch {epoch} (gradient norm {grad_norm})")]
    NonFinite { epoch: usize, grad_norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Named dense tensors. Biases and vectors are stored as `1 x n` or `n x 1`
/// matrices so every parameter has the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new(entries: Vec<(&str, Array2<f64>)>) -> Self {
        let (names, tensors) = entries.into_iter().map(|(n, t)| (n.to_string(), t)).unzip();
        ParamSet { names, tensors }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.dim() == b.dim())
    }
}

/// One response: skill index and correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub skill: usize,
    pub correct: bool,
}

pub fn tokens(seq: &StudentSequence) -> Vec<Token> {
    seq.records
        .iter()
        .map(|r| Token {
            skill: r.skill_id.index(),
            correct: r.correct,
        })
        .collect()
}

/// Predictions `[start, end)` of `tokens` contribute to the loss. DKT units
/// are whole chunks; SAKT units keep the full prefix as attention context.
#[derive(Debug, Clone, Copy)]
pub struct Unit<'a> {
    pub tokens: &'a [Token],
    pub start: usize,
    pub end: usize,
}

impl<'a> Unit<'a> {
    pub fn whole(tokens: &'a [Token]) -> Self {
        Unit {
            tokens,
            start: 0,
            end: tokens.len(),
        }
    }
}

/// Binary cross-entropy from a logit, `softplus(z) - y z`.
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    crate::logreg::sigmoid(z)
}

/// A sequence model trained with per-step binary cross-entropy.
pub trait NeuralModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Summed loss, number of scored steps and summed gradient over `units`.
    fn loss_and_grad(&self, units: &[Unit<'_>]) -> (f64, usize, ParamSet);
    /// Summed loss and number of scored steps, without gradients.
    fn loss(&self, units: &[Unit<'_>]) -> (f64, usize);
}

/// Shared optimizer settings.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub deadline: Option<Instant>,
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Training stopped early because the wall-clock budget ran out.
    pub truncated: bool,
}

pub(crate) fn train<M: NeuralModel>(
    model: &mut M,
    units: &[Unit<'_>],
    s: &TrainSettings,
) -> Result<TrainReport, NeuralError> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xD1CE);
    let mut adam = Adam::new(model.params(), s.learning_rate);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut report = TrainReport::default();
    'epochs: for epoch in 0..s.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
        for batch_idx in order.chunks(s.batch_size.max(1)) {
            let batch: Vec<Unit<'_>> = batch_idx.iter().map(|&i| units[i]).collect();
            let (loss, count, mut grad) = model.loss_and_grad(&batch);
            if count == 0 {
                continue;
            }
            grad.scale(1.0 / count as f64);
            let grad_norm = clip_grad_norm(&mut grad, s.clip_norm);
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(NeuralError::NonFinite { epoch, grad_norm });
            }
            adam.step(model.params_mut(), &grad);
            epoch_loss += loss;
            epoch_count += count;
            if s.deadline.is_some_and(|d| Instant::now() >= d) {
                warn!("training budget exhausted during epoch {epoch}");
                report.truncated = true;
                report.epoch_losses.push(epoch_loss / epoch_count.max(1) as f64);
                break 'epochs;
            }
        }
        let mean = epoch_loss / epoch_count.max(1) as f64;
        debug!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    if !model.params().all_finite() {
        return Err(NeuralError::NonFinite {
            epoch: report.epoch_losses.len(),
            grad_norm: f64::NAN,
        });
    }
    Ok(report)
}

pub(crate) fn check_vocab(train: &Dataset) -> Result<usize, NeuralError> {
    match train.n_skills() {
        0 => Err(NeuralError::EmptyVocab),
        n => Ok(n),
    }
}
