//! Best-LR: logistic regression over history counts, `p = σ(w·Φ)`.
//!
//! Training minimizes mean cross-entropy plus `λ‖w‖²/2`. Small problems use
//! full-batch gradient descent with a backtracking line search, large ones
//! plain mini-batch SGD.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, StudentSequence};
use crate::features::{
    best_lr_vector, scale_count, sequence_features, FeatureConfig, FeatureError, FeatureSpace, FeatureVector,
    HistoryFeatures, BIAS, SKILL_CORRECT, SKILL_WRONG, TOTAL_CORRECT, TOTAL_WRONG,
};
use crate::prediction::{Prediction, SequencePredictor};

#[derive(Debug, Error, PartialEq)]
pub enum LrError {
    #[error("feature vector has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    Empty,
    #[error("training diverged (non-finite loss) with config {0}")]
    Divergence(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("malformed model file: {0}")]
    Parse(String),
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    pub weights: Vec<f64>,
    pub space: FeatureSpace,
}

impl LrModel {
    pub fn zeros(space: FeatureSpace) -> Self {
        LrModel {
            weights: vec![0.0; space.dimension()],
            space,
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.space.config;
        let mut out = format!(
            "# best-lr\ndim={} n_skills={} n_items={} log_scale={} skill_counts={} skill_onehot={} item_onehot={}\n",
            self.weights.len(),
            self.space.n_skills,
            self.space.n_items,
            c.log_scale,
            c.skill_counts,
            c.skill_onehot,
            c.item_onehot
        );
        for w in &self.weights {
            let _ = writeln!(out, "{w}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<LrModel, LrError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| LrError::Parse("missing header".into()))?;
        let mut dim = None;
        let (mut n_skills, mut n_items) = (0, 0);
        let mut config = FeatureConfig::default();
        for kv in header.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| LrError::Parse(format!("bad header field `{kv}`")))?;
            let bad = || LrError::Parse(format!("bad value for {k}: `{v}`"));
            match k {
                "dim" => dim = Some(v.parse::<usize>().map_err(|_| bad())?),
                "n_skills" => n_skills = v.parse().map_err(|_| bad())?,
                "n_items" => n_items = v.parse().map_err(|_| bad())?,
                "log_scale" => config.log_scale = v.parse().map_err(|_| bad())?,
                "skill_counts" => config.skill_counts = v.parse().map_err(|_| bad())?,
                "skill_onehot" => config.skill_onehot = v.parse().map_err(|_| bad())?,
                "item_onehot" => config.item_onehot = v.parse().map_err(|_| bad())?,
                _ => return Err(LrError::Parse(format!("unknown header field `{k}`"))),
            }
        }
        let weights = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| LrError::Parse(format!("bad weight `{l}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let space = FeatureSpace::new(config, n_skills, n_items);
        let dim = dim.ok_or_else(|| LrError::Parse("header lacks dim".into()))?;
        if dim != weights.len() || dim != space.dimension() {
            return Err(LrError::DimensionMismatch {
                expected: space.dimension(),
                got: weights.len(),
            });
        }
        Ok(LrModel { weights, space })
    }
}

pub fn lr_predict(m: &LrModel, x: &FeatureVector) -> Result<Prediction, LrError> {
    if x.dimension != m.weights.len() {
        return Err(LrError::DimensionMismatch {
            expected: m.weights.len(),
            got: x.dimension,
        });
    }
    Ok(Prediction::from_probability(sigmoid(x.dot(&m.weights))))
}

/// Mean cross-entropy of `batch` plus `λ‖w‖²/2`.
pub fn lr_loss(w: &[f64], batch: &[(FeatureVector, f64)], lambda: f64) -> f64 {
    let ce: f64 = batch
        .iter()
        .map(|(x, y)| {
            let z = x.dot(w);
            softplus(z) - y * z
        })
        .sum::<f64>()
        / batch.len() as f64;
    ce + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`lr_loss`].
pub fn lr_gradient(w: &[f64], batch: &[(FeatureVector, f64)], lambda: f64) -> Vec<f64> {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    let mut g: Vec<f64> = w.iter().map(|v| lambda * v).collect();
    let scale = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let r = (sigmoid(x.dot(w)) - y) * scale;
        for &(i, v) in &x.entries {
            g[i] += r * v;
        }
    }
    g
}

fn default_lambda() -> f64 {
    1e-4
}
fn default_full_batch_limit() -> usize {
    1_000_000
}
fn default_batch_size() -> usize {
    512
}
fn default_step() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    20
}
fn default_max_iter() -> usize {
    2000
}
fn default_grad_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub features: FeatureConfig,
    /// Row count from which mini-batch SGD replaces full-batch descent.
    #[serde(default = "default_full_batch_limit")]
    pub full_batch_limit: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Iteration cap for full-batch descent.
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub deadline: Option<Instant>,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            lambda: default_lambda(),
            features: FeatureConfig::default(),
            full_batch_limit: default_full_batch_limit(),
            batch_size: default_batch_size(),
            step: default_step(),
            epochs: default_epochs(),
            max_iter: default_max_iter(),
            grad_tol: default_grad_tol(),
            seed: 0,
            deadline: None,
        }
    }
}

/// Compressed sparse rows with labels.
struct Design {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

const CHUNK: usize = 4096;

impl Design {
    fn from_dataset(train: &Dataset, space: &FeatureSpace) -> Result<Design, LrError> {
        let mut d = Design {
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::new(),
            dim: space.dimension(),
        };
        for seq in &train.sequences {
            for (f, r) in sequence_features(seq).iter().zip(&seq.records) {
                let x = best_lr_vector(f, space)?;
                for (i, v) in x.entries {
                    d.indices.push(i as u32);
                    d.values.push(v);
                }
                d.offsets.push(d.indices.len());
                d.labels.push(r.label());
            }
        }
        Ok(d)
    }

    fn from_rows(rows: &[(FeatureVector, f64)], dim: usize) -> Design {
        let mut d = Design {
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::new(),
            dim,
        };
        for (x, y) in rows {
            for &(i, v) in &x.entries {
                d.indices.push(i as u32);
                d.values.push(v);
            }
            d.offsets.push(d.indices.len());
            d.labels.push(*y);
        }
        d
    }

    fn n_rows(&self) -> usize {
        self.labels.len()
    }

    fn margin(&self, row: usize, w: &[f64]) -> f64 {
        let (a, b) = (self.offsets[row], self.offsets[row + 1]);
        self.indices[a..b]
            .iter()
            .zip(&self.values[a..b])
            .map(|(&i, &v)| w[i as usize] * v)
            .sum()
    }

    /// Loss and gradient over `rows`; chunk partials are reduced in a fixed
    /// order so results do not depend on the thread count.
    fn loss_grad(&self, w: &[f64], rows: &[usize], lambda: f64, want_grad: bool) -> (f64, Vec<f64>) {
        let partials: Vec<(f64, Vec<f64>)> = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = if want_grad { vec![0.0; self.dim] } else { Vec::new() };
                let mut loss = 0.0;
                for &r in chunk {
                    let z = self.margin(r, w);
                    let y = self.labels[r];
                    loss += softplus(z) - y * z;
                    if want_grad {
                        let resid = sigmoid(z) - y;
                        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
                        for (&i, &v) in self.indices[a..b].iter().zip(&self.values[a..b]) {
                            g[i as usize] += resid * v;
                        }
                    }
                }
                (loss, g)
            })
            .collect();
        let n = rows.len() as f64;
        let mut loss = 0.0;
        let mut grad = if want_grad { vec![0.0; self.dim] } else { Vec::new() };
        for (l, g) in partials {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        loss /= n;
        loss += 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        for (acc, wi) in grad.iter_mut().zip(w) {
            *acc = *acc / n + lambda * wi;
        }
        (loss, grad)
    }
}

/// Per-iteration (full batch) or per-epoch mean (mini-batch) training loss.
#[derive(Debug, Clone, Default)]
pub struct LrTrace {
    pub losses: Vec<f64>,
    pub full_batch: bool,
}

fn divergence(cfg: &LrConfig) -> LrError {
    LrError::Divergence(format!("{cfg:?}"))
}

fn full_batch(design: &Design, cfg: &LrConfig) -> Result<(Vec<f64>, LrTrace), LrError> {
    let rows: Vec<usize> = (0..design.n_rows()).collect();
    let mut w = vec![0.0; design.dim];
    let (mut loss, mut grad) = design.loss_grad(&w, &rows, cfg.lambda, true);
    let mut trace = LrTrace {
        losses: vec![loss],
        full_batch: true,
    };
    let mut step = 1.0;
    for _ in 0..cfg.max_iter {
        if !loss.is_finite() {
            return Err(divergence(cfg));
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2.sqrt() < cfg.grad_tol || cfg.deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        // Armijo backtracking; the step grows again after each success.
        step *= 2.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let (cand_loss, _) = design.loss_grad(&cand, &rows, cfg.lambda, false);
            if cand_loss.is_finite() && cand_loss <= loss - 1e-4 * step * g2 {
                accepted = Some(cand);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };
        w = next;
        let (next_loss, next_grad) = design.loss_grad(&w, &rows, cfg.lambda, true);
        let improvement = loss - next_loss;
        loss = next_loss;
        grad = next_grad;
        trace.losses.push(loss);
        if improvement.abs() <= 1e-12 * loss.abs().max(1.0) {
            break;
        }
    }
    if !loss.is_finite() {
        return Err(divergence(cfg));
    }
    Ok((w, trace))
}

fn mini_batch(design: &Design, cfg: &LrConfig) -> Result<(Vec<f64>, LrTrace), LrError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..design.n_rows()).collect();
    let mut w = vec![0.0; design.dim];
    let mut trace = LrTrace::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (loss, grad) = design.loss_grad(&w, batch, cfg.lambda, true);
            if !loss.is_finite() {
                return Err(divergence(cfg));
            }
            epoch_loss += loss;
            batches += 1;
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.step * gi;
            }
        }
        trace.losses.push(epoch_loss / batches as f64);
        if cfg.deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
    }
    Ok((w, trace))
}

fn fit_design(design: &Design, cfg: &LrConfig) -> Result<(Vec<f64>, LrTrace), LrError> {
    if design.n_rows() == 0 {
        return Err(LrError::Empty);
    }
    if design.n_rows() < cfg.full_batch_limit {
        full_batch(design, cfg)
    } else {
        mini_batch(design, cfg)
    }
}

/// Fits on explicit `(features, label)` rows.
pub fn fit_rows(
    rows: &[(FeatureVector, f64)],
    space: FeatureSpace,
    cfg: &LrConfig,
) -> Result<(LrModel, LrTrace), LrError> {
    let dim = space.dimension();
    if let Some((x, _)) = rows.iter().find(|(x, _)| x.dimension != dim) {
        return Err(LrError::DimensionMismatch {
            expected: dim,
            got: x.dimension,
        });
    }
    let design = Design::from_rows(rows, dim);
    let (weights, trace) = fit_design(&design, cfg)?;
    Ok((LrModel { weights, space }, trace))
}

pub fn fit_best_lr_traced(train: &Dataset, cfg: &LrConfig) -> Result<(LrModel, LrTrace), LrError> {
    let space = FeatureSpace::new(cfg.features, train.n_skills(), train.n_items());
    let design = Design::from_dataset(train, &space)?;
    let (weights, trace) = fit_design(&design, cfg)?;
    Ok((LrModel { weights, space }, trace))
}

pub fn fit_best_lr(train: &Dataset, cfg: &LrConfig) -> Result<LrModel, LrError> {
    fit_best_lr_traced(train, cfg).map(|(m, _)| m)
}

impl LrModel {
    /// Margin from the bias and count columns only.
    fn count_margin(&self, f: &HistoryFeatures) -> f64 {
        let cfg = &self.space.config;
        let s = |x| scale_count(x, cfg.log_scale);
        let mut z = self.weights[BIAS]
            + self.weights[TOTAL_CORRECT] * s(f.total_correct)
            + self.weights[TOTAL_WRONG] * s(f.total_wrong);
        if cfg.skill_counts {
            z += self.weights[SKILL_CORRECT] * s(f.skill_correct) + self.weights[SKILL_WRONG] * s(f.skill_wrong);
        }
        z
    }
}

impl SequencePredictor for LrModel {
    fn predict_sequence(&self, seq: &StudentSequence) -> Vec<Prediction> {
        sequence_features(seq)
            .iter()
            .map(|f| {
                let z = match best_lr_vector(f, &self.space) {
                    Ok(x) => x.dot(&self.weights),
                    // ids beyond the training vocabulary get no one-hot term
                    Err(_) => self.count_margin(f),
                };
                Prediction::from_probability(sigmoid(z))
            })
            .collect()
    }
}
