//! Deep Knowledge Tracing: an LSTM over (skill, correctness) one-hots with a
//! sigmoid output per skill.
//!
//! The prediction for step `t` reads the output unit of skill `K_t` from the
//! hidden state after steps `< t`; step 0 reads the zero initial state.

use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bce_with_logit, check_vocab, sigmoid, tokens, train, NeuralError, NeuralModel, ParamSet, Token, TrainReport,
    TrainSettings, Unit,
};
use crate::dataset::{Dataset, InteractionRecord, StudentSequence};
use crate::prediction::{Prediction, SequencePredictor};

const W_X: usize = 0;
const W_H: usize = 1;
const B: usize = 2;
const W_Y: usize = 3;
const B_Y: usize = 4;

fn d_hidden() -> usize {
    100
}
fn d_max_seq_len() -> usize {
    200
}
fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-3
}
fn d_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DktConfig {
    #[serde(default = "d_hidden")]
    pub hidden_size: usize,
    #[serde(default = "d_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub deadline: Option<Instant>,
}

impl Default for DktConfig {
    fn default() -> Self {
        DktConfig {
            hidden_size: d_hidden(),
            max_seq_len: d_max_seq_len(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            clip_norm: d_clip(),
            seed: 0,
            deadline: None,
        }
    }
}

impl DktConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.hidden_size == 0 {
            return Err(NeuralError::InvalidConfig("hidden_size must be >= 1".into()));
        }
        if self.max_seq_len < 2 {
            return Err(NeuralError::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// One-hot of length `2 * n_skills`, hot at `skill + correct * n_skills`.
pub fn encode_dkt_input(record: &InteractionRecord, n_skills: usize) -> Result<Vec<f64>, NeuralError> {
    let skill = record.skill_id.index();
    if skill >= n_skills {
        return Err(NeuralError::UnknownSkill { skill, n_skills });
    }
    let mut v = vec![0.0; 2 * n_skills];
    v[skill + usize::from(record.correct) * n_skills] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DktModel {
    pub config: DktConfig,
    pub n_skills: usize,
    pub params: ParamSet,
}

struct Step {
    input: Option<usize>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    tanh_c: Array1<f64>,
}

struct Trace {
    logits: Vec<f64>,
    /// `h_prev[t]` / `c_prev[t]`: state before consuming token `t`.
    h_prev: Vec<Array1<f64>>,
    c_prev: Vec<Array1<f64>>,
    steps: Vec<Step>,
}

fn sigmoid_vec(v: ArrayView1<f64>) -> Array1<f64> {
    v.mapv(sigmoid)
}

impl DktModel {
    /// Recurrent weights uniform in `±1/sqrt(H)`, forget-gate bias 1, and a
    /// zero output layer (every initial prediction is 0.5).
    pub fn new(config: DktConfig, n_skills: usize) -> Result<Self, NeuralError> {
        config.validate()?;
        if n_skills == 0 {
            return Err(NeuralError::EmptyVocab);
        }
        let h = config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform =
            |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        let w_x = uniform(4 * h, 2 * n_skills);
        let w_h = uniform(4 * h, h);
        let mut b = Array2::zeros((4 * h, 1));
        b.slice_mut(s![h..2 * h, ..]).fill(1.0);
        let params = ParamSet::new(vec![
            ("w_x", w_x),
            ("w_h", w_h),
            ("b", b),
            ("w_y", Array2::zeros((n_skills, h))),
            ("b_y", Array2::zeros((n_skills, 1))),
        ]);
        Ok(DktModel {
            config,
            n_skills,
            params,
        })
    }

    fn hidden(&self) -> usize {
        self.config.hidden_size
    }

    fn input_index(&self, t: &Token) -> Option<usize> {
        (t.skill < self.n_skills).then(|| t.skill + usize::from(t.correct) * self.n_skills)
    }

    fn forward(&self, toks: &[Token]) -> Trace {
        let h_dim = self.hidden();
        let p = &self.params.tensors;
        let mut h = Array1::zeros(h_dim);
        let mut c = Array1::zeros(h_dim);
        let mut trace = Trace {
            logits: Vec::with_capacity(toks.len()),
            h_prev: Vec::with_capacity(toks.len()),
            c_prev: Vec::with_capacity(toks.len()),
            steps: Vec::with_capacity(toks.len()),
        };
        for (t, tok) in toks.iter().enumerate() {
            let logit = if tok.skill < self.n_skills {
                p[W_Y].row(tok.skill).dot(&h) + p[B_Y][[tok.skill, 0]]
            } else {
                0.0
            };
            trace.logits.push(logit);
            trace.h_prev.push(h.clone());
            trace.c_prev.push(c.clone());
            if t + 1 == toks.len() {
                break;
            }
            let input = self.input_index(tok);
            let mut z = p[W_H].dot(&h) + p[B].column(0);
            if let Some(idx) = input {
                z += &p[W_X].column(idx);
            }
            let i = sigmoid_vec(z.slice(s![0..h_dim]));
            let f = sigmoid_vec(z.slice(s![h_dim..2 * h_dim]));
            let g = z.slice(s![2 * h_dim..3 * h_dim]).mapv(f64::tanh);
            let o = sigmoid_vec(z.slice(s![3 * h_dim..4 * h_dim]));
            c = &f * &c + &i * &g;
            let tanh_c = c.mapv(f64::tanh);
            h = &o * &tanh_c;
            trace.steps.push(Step {
                input,
                i,
                f,
                g,
                o,
                tanh_c,
            });
        }
        trace
    }

    fn backward(&self, toks: &[Token], trace: &Trace, range: (usize, usize), grad: &mut ParamSet) -> f64 {
        let h_dim = self.hidden();
        let p = &self.params.tensors;
        let n = toks.len();
        let mut loss = 0.0;
        let mut dh: Vec<Array1<f64>> = vec![Array1::zeros(h_dim); n];
        for t in range.0..range.1 {
            let tok = toks[t];
            let y = if tok.correct { 1.0 } else { 0.0 };
            let z = trace.logits[t];
            loss += bce_with_logit(z, y);
            if tok.skill >= self.n_skills {
                continue;
            }
            let dz = sigmoid(z) - y;
            grad.tensors[W_Y].row_mut(tok.skill).scaled_add(dz, &trace.h_prev[t]);
            grad.tensors[B_Y][[tok.skill, 0]] += dz;
            dh[t].scaled_add(dz, &p[W_Y].row(tok.skill));
        }

        let mut dc_carry = Array1::<f64>::zeros(h_dim);
        let mut dzs = Array1::<f64>::zeros(4 * h_dim);
        for t in (0..trace.steps.len()).rev() {
            let st = &trace.steps[t];
            // dh[t + 1] holds the full gradient into the state produced here
            let dh_t = &dh[t + 1];
            let d_o = dh_t * &st.tanh_c;
            let dc = &dc_carry + &(dh_t * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v));
            let di = &dc * &st.g;
            let dg = &dc * &st.i;
            let df = &dc * &trace.c_prev[t];
            dc_carry = &dc * &st.f;
            dzs.slice_mut(s![0..h_dim])
                .assign(&(&di * &st.i.mapv(|v| v * (1.0 - v))));
            dzs.slice_mut(s![h_dim..2 * h_dim])
                .assign(&(&df * &st.f.mapv(|v| v * (1.0 - v))));
            dzs.slice_mut(s![2 * h_dim..3 * h_dim])
                .assign(&(&dg * &st.g.mapv(|v| 1.0 - v * v)));
            dzs.slice_mut(s![3 * h_dim..4 * h_dim])
                .assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));

            if let Some(idx) = st.input {
                grad.tensors[W_X].column_mut(idx).scaled_add(1.0, &dzs);
            }
            grad.tensors[B].column_mut(0).scaled_add(1.0, &dzs);
            let dz_col = dzs.view().insert_axis(Axis(1));
            let h_row = trace.h_prev[t].view().insert_axis(Axis(0));
            general_mat_mul(1.0, &dz_col, &h_row, 1.0, &mut grad.tensors[W_H]);
            let back = p[W_H].t().dot(&dzs);
            dh[t] += &back;
        }
        loss
    }

    /// Output probabilities for each step of `toks`, resetting the state
    /// every `max_seq_len` steps.
    pub fn predict_tokens(&self, toks: &[Token]) -> Vec<f64> {
        toks.chunks(self.config.max_seq_len)
            .flat_map(|chunk| self.forward(chunk).logits.into_iter().map(sigmoid))
            .collect()
    }

    fn units<'a>(&self, seqs: &'a [Vec<Token>]) -> Vec<Unit<'a>> {
        seqs.iter()
            .flat_map(|s| s.chunks(self.config.max_seq_len))
            .map(Unit::whole)
            .collect()
    }
}

impl NeuralModel for DktModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, units: &[Unit<'_>]) -> (f64, usize, ParamSet) {
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        let mut count = 0;
        for u in units {
            let toks = &u.tokens[..u.end];
            let trace = self.forward(toks);
            loss += self.backward(toks, &trace, (u.start, u.end), &mut grad);
            count += u.end - u.start;
        }
        (loss, count, grad)
    }

    fn loss(&self, units: &[Unit<'_>]) -> (f64, usize) {
        let mut loss = 0.0;
        let mut count = 0;
        for u in units {
            let trace = self.forward(&u.tokens[..u.end]);
            for t in u.start..u.end {
                loss += bce_with_logit(trace.logits[t], if u.tokens[t].correct { 1.0 } else { 0.0 });
            }
            count += u.end - u.start;
        }
        (loss, count)
    }
}

fn training_tokens(train: &Dataset, n_skills: usize) -> Result<Vec<Vec<Token>>, NeuralError> {
    let seqs: Vec<Vec<Token>> = train.sequences.iter().map(tokens).collect();
    for t in seqs.iter().flatten() {
        if t.skill >= n_skills {
            return Err(NeuralError::UnknownSkill {
                skill: t.skill,
                n_skills,
            });
        }
    }
    Ok(seqs)
}

pub fn fit_dkt_traced(train_set: &Dataset, config: &DktConfig) -> Result<(DktModel, TrainReport), NeuralError> {
    let n_skills = check_vocab(train_set)?;
    let mut model = DktModel::new(config.clone(), n_skills)?;
    let seqs = training_tokens(train_set, n_skills)?;
    let units = model.units(&seqs);
    let report = train(
        &mut model,
        &units,
        &TrainSettings {
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            clip_norm: config.clip_norm,
            seed: config.seed,
            deadline: config.deadline,
        },
    )?;
    Ok((model, report))
}

pub fn fit_dkt(train_set: &Dataset, config: &DktConfig) -> Result<DktModel, NeuralError> {
    fit_dkt_traced(train_set, config).map(|(m, _)| m)
}

pub fn dkt_predict_sequence(model: &DktModel, seq: &StudentSequence) -> Vec<Prediction> {
    model
        .predict_tokens(&tokens(seq))
        .into_iter()
        .map(Prediction::from_probability)
        .collect()
}

impl SequencePredictor for DktModel {
    fn predict_sequence(&self, seq: &StudentSequence) -> Vec<Prediction> {
        dkt_predict_sequence(self, seq)
    }
}
