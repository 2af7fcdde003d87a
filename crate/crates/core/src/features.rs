//! History counters at a prediction point and the Best-LR feature encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ItemId, SkillId, StudentSequence};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("position {position} out of range for a sequence of length {len}")]
    OutOfRange { position: usize, len: usize },
    #[error("skill {0} is outside the skill vocabulary")]
    UnknownSkill(SkillId),
    #[error("item {0:?} is outside the item vocabulary")]
    UnknownItem(ItemId),
}

/// Counts over the answers strictly before `position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryFeatures {
    pub question_id: ItemId,
    pub skill_id: SkillId,
    pub total_correct: u64,
    pub total_wrong: u64,
    pub skill_correct: u64,
    pub skill_wrong: u64,
    pub position: usize,
}

pub fn history_features(seq: &StudentSequence, i: usize) -> Result<HistoryFeatures, FeatureError> {
    let target = seq.records.get(i).ok_or(FeatureError::OutOfRange {
        position: i,
        len: seq.len(),
    })?;
    let mut f = HistoryFeatures {
        question_id: target.item_id,
        skill_id: target.skill_id,
        total_correct: 0,
        total_wrong: 0,
        skill_correct: 0,
        skill_wrong: 0,
        position: i,
    };
    for r in &seq.records[..i] {
        let same = r.skill_id == target.skill_id;
        if r.correct {
            f.total_correct += 1;
            f.skill_correct += u64::from(same);
        } else {
            f.total_wrong += 1;
            f.skill_wrong += u64::from(same);
        }
    }
    Ok(f)
}

/// Features for every position of `seq` using running counters.
pub fn sequence_features(seq: &StudentSequence) -> Vec<HistoryFeatures> {
    let mut per_skill: HashMap<SkillId, (u64, u64)> = HashMap::new();
    let (mut right, mut wrong) = (0u64, 0u64);
    seq.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (sc, sw) = per_skill.get(&r.skill_id).copied().unwrap_or((0, 0));
            let f = HistoryFeatures {
                question_id: r.item_id,
                skill_id: r.skill_id,
                total_correct: right,
                total_wrong: wrong,
                skill_correct: sc,
                skill_wrong: sw,
                position: i,
            };
            let e = per_skill.entry(r.skill_id).or_insert((0, 0));
            if r.correct {
                right += 1;
                e.0 += 1;
            } else {
                wrong += 1;
                e.1 += 1;
            }
            f
        })
        .collect()
}

fn yes() -> bool {
    true
}

/// Which blocks the Best-LR encoding contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Apply `ln(1 + x)` to the counts.
    #[serde(default = "yes")]
    pub log_scale: bool,
    /// Fill the per-skill count columns; when off they stay zero.
    #[serde(default = "yes")]
    pub skill_counts: bool,
    #[serde(default = "yes")]
    pub skill_onehot: bool,
    #[serde(default)]
    pub item_onehot: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            log_scale: true,
            skill_counts: true,
            skill_onehot: true,
            item_onehot: false,
        }
    }
}

/// Column layout: `[bias, B, C, D, E, skill one-hot.., item one-hot..]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub config: FeatureConfig,
    pub n_skills: usize,
    pub n_items: usize,
}

pub const BIAS: usize = 0;
pub const TOTAL_CORRECT: usize = 1;
pub const TOTAL_WRONG: usize = 2;
pub const SKILL_CORRECT: usize = 3;
pub const SKILL_WRONG: usize = 4;
const DENSE_COLUMNS: usize = 5;

impl FeatureSpace {
    pub fn new(config: FeatureConfig, n_skills: usize, n_items: usize) -> Self {
        FeatureSpace {
            config,
            n_skills,
            n_items,
        }
    }

    pub fn dimension(&self) -> usize {
        let mut d = DENSE_COLUMNS;
        if self.config.skill_onehot {
            d += self.n_skills;
        }
        if self.config.item_onehot {
            d += self.n_items;
        }
        d
    }

    fn item_offset(&self) -> usize {
        DENSE_COLUMNS + if self.config.skill_onehot { self.n_skills } else { 0 }
    }
}

/// Sparse `(index, value)` pairs with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub entries: Vec<(usize, f64)>,
    pub dimension: usize,
}

impl FeatureVector {
    pub fn new(entries: Vec<(usize, f64)>, dimension: usize) -> Self {
        debug_assert!(entries.iter().all(|(i, v)| *i < dimension && v.is_finite()));
        FeatureVector { entries, dimension }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| w[i] * v).sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.iter().filter(|(_, v)| *v != 0.0).count()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }
}

pub fn scale_count(x: u64, log_scale: bool) -> f64 {
    if log_scale {
        (x as f64).ln_1p()
    } else {
        x as f64
    }
}

pub fn best_lr_vector(f: &HistoryFeatures, space: &FeatureSpace) -> Result<FeatureVector, FeatureError> {
    let cfg = &space.config;
    if f.skill_id.index() >= space.n_skills {
        return Err(FeatureError::UnknownSkill(f.skill_id));
    }
    let s = |x| scale_count(x, cfg.log_scale);
    let mut entries = vec![
        (BIAS, 1.0),
        (TOTAL_CORRECT, s(f.total_correct)),
        (TOTAL_WRONG, s(f.total_wrong)),
    ];
    if cfg.skill_counts {
        entries.push((SKILL_CORRECT, s(f.skill_correct)));
        entries.push((SKILL_WRONG, s(f.skill_wrong)));
    }
    if cfg.skill_onehot {
        entries.push((DENSE_COLUMNS + f.skill_id.index(), 1.0));
    }
    if cfg.item_onehot {
        let item = f.question_id.0 as usize;
        if item >= space.n_items {
            return Err(FeatureError::UnknownItem(f.question_id));
        }
        entries.push((space.item_offset() + item, 1.0));
    }
    Ok(FeatureVector::new(entries, space.dimension()))
}
