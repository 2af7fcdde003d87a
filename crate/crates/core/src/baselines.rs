//! Naive predictors: the training mean, the running mean of a student's own
//! answers (NaP), and the running mean restricted to the next skill (NaP
//! Skills). Cold starts fall back NaP Skills -> NaP -> Mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, StudentSequence};
use crate::features::{sequence_features, HistoryFeatures};
use crate::prediction::{Prediction, SequencePredictor};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("training set has no interactions")]
    EmptyTrainingSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanModel {
    pub train_mean: f64,
}

pub fn fit_mean(train: &Dataset) -> Result<MeanModel, BaselineError> {
    let train_mean = train.correct_rate().ok_or(BaselineError::EmptyTrainingSet)?;
    Ok(MeanModel { train_mean })
}

pub fn predict_mean(m: &MeanModel) -> Prediction {
    Prediction::from_probability(m.train_mean)
}

pub fn predict_nap(f: &HistoryFeatures, fallback: &MeanModel) -> Prediction {
    let seen = f.total_correct + f.total_wrong;
    if seen == 0 {
        return predict_mean(fallback);
    }
    Prediction::from_probability(f.total_correct as f64 / seen as f64)
}

pub fn predict_nap_skills(f: &HistoryFeatures, fallback: &MeanModel) -> Prediction {
    let seen = f.skill_correct + f.skill_wrong;
    if seen == 0 {
        return predict_nap(f, fallback);
    }
    Prediction::from_probability(f.skill_correct as f64 / seen as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NaiveKind {
    Mean,
    Nap,
    NapSkills,
}

/// A naive predictor together with its mean fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveModel {
    pub kind: NaiveKind,
    pub mean: MeanModel,
}

impl SequencePredictor for NaiveModel {
    fn predict_sequence(&self, seq: &StudentSequence) -> Vec<Prediction> {
        sequence_features(seq)
            .iter()
            .map(|f| match self.kind {
                NaiveKind::Mean => predict_mean(&self.mean),
                NaiveKind::Nap => predict_nap(f, &self.mean),
                NaiveKind::NapSkills => predict_nap_skills(f, &self.mean),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ColumnMapping, ItemId, SkillId, UserId};
    use crate::prediction::Label;
    use proptest::prelude::*;

    fn seq(triples: &[(u32, bool)]) -> StudentSequence {
        StudentSequence::from_triples(
            UserId(0),
            triples
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| (ItemId(i as u32), SkillId(s), c)),
        )
    }

    fn last_features(s: &StudentSequence) -> HistoryFeatures {
        *sequence_features(s).last().unwrap()
    }

    #[test]
    fn mean_of_labels() {
        let text = "user_id,item_id,skill_id,correct\na,1,1,1\na,1,1,0\nb,1,1,1\nb,1,1,1\n";
        let d = crate::dataset::parse_interactions("t", text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(fit_mean(&d).unwrap().train_mean, 0.75);

        let all = "user_id,item_id,skill_id,correct\na,1,1,1\na,1,1,1\n";
        let d = crate::dataset::parse_interactions("t", all.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(fit_mean(&d).unwrap().train_mean, 1.0);

        let mut empty = d.clone();
        empty.sequences.clear();
        assert_eq!(fit_mean(&empty), Err(BaselineError::EmptyTrainingSet));
    }

    #[test]
    fn mean_prediction_labels() {
        let p = predict_mean(&MeanModel { train_mean: 0.765 });
        assert_eq!((p.p_correct, p.label), (0.765, Label::Correct));
        assert_eq!(predict_mean(&MeanModel { train_mean: 0.374 }).label, Label::Wrong);
        assert_eq!(predict_mean(&MeanModel { train_mean: 0.5 }).label, Label::Correct);
    }

    #[test]
    fn nap_examples() {
        let fallback = MeanModel { train_mean: 0.66 };
        let s = seq(&[(0, true), (0, true), (0, false), (0, true)]);
        let p = predict_nap(&last_features(&s), &fallback);
        assert!((p.p_correct - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.label, Label::Correct);

        let s = seq(&[(0, false), (0, false), (0, true)]);
        let p = predict_nap(&last_features(&s), &fallback);
        assert_eq!((p.p_correct, p.label), (0.0, Label::Wrong));

        let s = seq(&[(0, true)]);
        assert_eq!(predict_nap(&last_features(&s), &fallback).p_correct, 0.66);
    }

    #[test]
    fn nap_skills_examples() {
        let fallback = MeanModel { train_mean: 0.5 };
        let s = seq(&[(1, true), (2, false), (1, true), (1, false), (1, true)]);
        let p = predict_nap_skills(&last_features(&s), &fallback);
        assert!((p.p_correct - 2.0 / 3.0).abs() < 1e-15);

        let s = seq(&[(1, true), (2, false), (1, true), (3, true)]);
        let f = last_features(&s);
        assert_eq!(predict_nap_skills(&f, &fallback), predict_nap(&f, &fallback));

        let s = seq(&[(4, true), (4, false), (4, false), (4, true)]);
        let f = last_features(&s);
        assert_eq!(predict_nap_skills(&f, &fallback), predict_nap(&f, &fallback));
    }

    #[test]
    fn mean_is_constant_over_sequence() {
        let m = NaiveModel {
            kind: NaiveKind::Mean,
            mean: MeanModel { train_mean: 0.7 },
        };
        let s = seq(&[(1, true), (2, false), (1, false)]);
        let preds = m.predict_sequence(&s);
        assert!(preds.iter().all(|p| *p == preds[0]));
    }

    proptest! {
        #[test]
        fn nap_equals_mean_of_prior_labels(labels in prop::collection::vec(any::<bool>(), 1..40)) {
            let triples: Vec<(u32, bool)> = labels.iter().map(|&c| (0, c)).collect();
            let s = seq(&triples);
            let m = NaiveModel { kind: NaiveKind::Nap, mean: MeanModel { train_mean: 0.3 } };
            let preds = m.predict_sequence(&s);
            for (i, p) in preds.iter().enumerate() {
                let expected = if i == 0 {
                    0.3
                } else {
                    labels[..i].iter().filter(|&&c| c).count() as f64 / i as f64
                };
                prop_assert!((p.p_correct - expected).abs() < 1e-15);
                prop_assert!((p.label_probability() - expected.max(1.0 - expected)).abs() < 1e-15);
            }
        }
    }
}
