//! Self-attentive knowledge tracing: one causal multi-head attention block
//! where the current exercise queries embeddings of past interactions.
//!
//! Key `m = 0` is a learned start token and key `m >= 1` is interaction
//! `m - 1`, so the query for step `i` sees exactly the interactions before
//! `i` plus the start token, limited to the last `window` keys. Positions are
//! embedded by distance to the query, which makes the window slide exactly.

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
use crate::dataset::{Dataset, StudentSequence};
use crate::prediction::{Prediction, SequencePredictor};

const E_INT: usize = 0;
const E_EX: usize = 1;
const POS: usize = 2;
const W_Q: usize = 3;
const W_K: usize = 4;
const W_V: usize = 5;
const W_O: usize = 6;
const LN1_G: usize = 7;
const LN1_B: usize = 8;
const W_1: usize = 9;
const B_1: usize = 10;
const W_2: usize = 11;
const B_2: usize = 12;
const LN2_G: usize = 13;
const LN2_B: usize = 14;
const W_OUT: usize = 15;
const B_OUT: usize = 16;

const LN_EPS: f64 = 1e-5;

fn d_embed() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_window() -> usize {
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
pub struct SaktConfig {
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_window")]
    pub window: usize,
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

impl Default for SaktConfig {
    fn default() -> Self {
        SaktConfig {
            embed_dim: d_embed(),
            num_heads: d_heads(),
            window: d_window(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            clip_norm: d_clip(),
            seed: 0,
            deadline: None,
        }
    }
}

impl SaktConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(NeuralError::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.window < 2 {
            return Err(NeuralError::InvalidConfig("window must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaktModel {
    pub config: SaktConfig,
    pub n_skills: usize,
    pub params: ParamSet,
}

/// Key and value projections of the embeddings one unit needs. Rows of
/// `xz`, `kz`, `vz` are keys `m_lo..m_hi`; rows of `kp`, `vp` are distances.
struct Shared {
    m_lo: usize,
    rows: Vec<Option<usize>>,
    xz: Array2<f64>,
    kz: Array2<f64>,
    vz: Array2<f64>,
    kp: Array2<f64>,
    vp: Array2<f64>,
}

struct SharedGrad {
    kz: Array2<f64>,
    vz: Array2<f64>,
    kp: Array2<f64>,
    vp: Array2<f64>,
}

struct LnCache {
    xhat: Array1<f64>,
    inv_std: f64,
}

struct QueryFwd {
    i: usize,
    skill: usize,
    lo: usize,
    q: Array1<f64>,
    weights: Vec<Array1<f64>>,
    o: Array1<f64>,
    ln1: LnCache,
    u: Array1<f64>,
    h1: Array1<f64>,
    r1: Array1<f64>,
    ln2: LnCache,
    y: Array1<f64>,
    logit: f64,
}

fn layer_norm(x: &Array1<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array1<f64>, LnCache) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat = x.mapv(|v| (v - mean) * inv_std);
    let out = &xhat * &g + b;
    (out, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates the gain and bias gradients.
fn layer_norm_backward(
    dy: &Array1<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array1<f64> {
    dg.row_mut(0).scaled_add(1.0, &(dy * &cache.xhat));
    db.row_mut(0).scaled_add(1.0, dy);
    let dxhat = dy * &g;
    let n = dxhat.len() as f64;
    let mean_d = dxhat.sum() / n;
    let mean_dx = (&dxhat * &cache.xhat).sum() / n;
    (dxhat - mean_d - &cache.xhat * mean_dx) * cache.inv_std
}

fn outer_add(target: &mut Array2<f64>, x: &Array1<f64>, dy: &Array1<f64>) {
    let col = x.view().insert_axis(Axis(1));
    let row = dy.view().insert_axis(Axis(0));
    general_mat_mul(1.0, &col, &row, 1.0, target);
}

impl SaktModel {
    pub fn new(config: SaktConfig, n_skills: usize) -> Result<Self, NeuralError> {
        config.validate()?;
        if n_skills == 0 {
            return Err(NeuralError::EmptyVocab);
        }
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform =
            |rows: usize, cols: usize, a: f64| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a));
        let emb = 0.1;
        let lin = (3.0 / d as f64).sqrt();
        let params = ParamSet::new(vec![
            ("e_int", uniform(2 * n_skills + 1, d, emb)),
            ("e_ex", uniform(n_skills, d, emb)),
            ("pos", uniform(config.window, d, emb)),
            ("w_q", uniform(d, d, lin)),
            ("w_k", uniform(d, d, lin)),
            ("w_v", uniform(d, d, lin)),
            ("w_o", uniform(d, d, lin)),
            ("ln1_g", Array2::ones((1, d))),
            ("ln1_b", Array2::zeros((1, d))),
            ("w_1", uniform(d, d, lin)),
            ("b_1", Array2::zeros((1, d))),
            ("w_2", uniform(d, d, lin)),
            ("b_2", Array2::zeros((1, d))),
            ("ln2_g", Array2::ones((1, d))),
            ("ln2_b", Array2::zeros((1, d))),
            ("w_out", Array2::zeros((d, 1))),
            ("b_out", Array2::zeros((1, 1))),
        ]);
        Ok(SaktModel {
            config,
            n_skills,
            params,
        })
    }

    fn head_dim(&self) -> usize {
        self.config.embed_dim / self.config.num_heads
    }

    fn bos(&self) -> usize {
        2 * self.n_skills
    }

    /// First key visible to query `i`.
    fn window_start(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.config.window)
    }

    fn interaction_row(&self, t: &Token) -> Option<usize> {
        (t.skill < self.n_skills).then(|| t.skill + usize::from(t.correct) * self.n_skills)
    }

    fn prepare(&self, toks: &[Token], m_lo: usize, m_hi: usize) -> Shared {
        let p = &self.params.tensors;
        let d = self.config.embed_dim;
        let rows: Vec<Option<usize>> = (m_lo..m_hi)
            .map(|m| {
                if m == 0 {
                    Some(self.bos())
                } else {
                    self.interaction_row(&toks[m - 1])
                }
            })
            .collect();
        let mut xz = Array2::zeros((rows.len(), d));
        for (r, row) in rows.iter().enumerate() {
            if let Some(idx) = row {
                xz.row_mut(r).assign(&p[E_INT].row(*idx));
            }
        }
        let kz = xz.dot(&p[W_K]);
        let vz = xz.dot(&p[W_V]);
        let kp = p[POS].dot(&p[W_K]);
        let vp = p[POS].dot(&p[W_V]);
        Shared {
            m_lo,
            rows,
            xz,
            kz,
            vz,
            kp,
            vp,
        }
    }

    fn query(&self, sh: &Shared, toks: &[Token], i: usize) -> Option<QueryFwd> {
        let skill = toks[i].skill;
        if skill >= self.n_skills {
            return None;
        }
        let p = &self.params.tensors;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let lo = self.window_start(i);
        let ex = p[E_EX].row(skill);
        let q = ex.dot(&p[W_Q]);
        let mut o = Array1::zeros(self.config.embed_dim);
        let mut weights = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let hs = s![a..b];
            let qh = q.slice(hs);
            let mut scores: Array1<f64> = (lo..=i)
                .map(|m| {
                    let k = &sh.kz.slice(s![m - sh.m_lo, a..b]) + &sh.kp.slice(s![i - m, a..b]);
                    qh.dot(&k) * scale
                })
                .collect();
            let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            scores.mapv_inplace(|v| (v - max).exp());
            let total = scores.sum();
            scores /= total;
            let mut oh = o.slice_mut(hs);
            for (j, m) in (lo..=i).enumerate() {
                oh.scaled_add(scores[j], &sh.vz.slice(s![m - sh.m_lo, a..b]));
                oh.scaled_add(scores[j], &sh.vp.slice(s![i - m, a..b]));
            }
            weights.push(scores);
        }
        let r = o.dot(&p[W_O]) + ex;
        let (u, ln1) = layer_norm(&r, p[LN1_G].row(0), p[LN1_B].row(0));
        let h1 = u.dot(&p[W_1]) + p[B_1].row(0);
        let r1 = h1.mapv(|v| v.max(0.0));
        let f = r1.dot(&p[W_2]) + p[B_2].row(0);
        let (y, ln2) = layer_norm(&(&f + &u), p[LN2_G].row(0), p[LN2_B].row(0));
        let logit = y.dot(&p[W_OUT].column(0)) + p[B_OUT][[0, 0]];
        Some(QueryFwd {
            i,
            skill,
            lo,
            q,
            weights,
            o,
            ln1,
            u,
            h1,
            r1,
            ln2,
            y,
            logit,
        })
    }

    fn query_backward(&self, fw: &QueryFwd, g: f64, sh: &Shared, dsh: &mut SharedGrad, grad: &mut ParamSet) {
        let p = &self.params.tensors;
        let gt = &mut grad.tensors;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let i = fw.i;

        gt[W_OUT].column_mut(0).scaled_add(g, &fw.y);
        gt[B_OUT][[0, 0]] += g;
        let dy = p[W_OUT].column(0).mapv(|w| w * g);
        let (dg2, rest) = gt.split_at_mut(LN2_B);
        let da = layer_norm_backward(&dy, &fw.ln2, p[LN2_G].row(0), &mut dg2[LN2_G], &mut rest[0]);

        gt[B_2].row_mut(0).scaled_add(1.0, &da);
        outer_add(&mut gt[W_2], &fw.r1, &da);
        let dr1 = p[W_2].dot(&da);
        let dh1 = ndarray::Zip::from(&dr1)
            .and(&fw.h1)
            .map_collect(|&d, &h| if h > 0.0 { d } else { 0.0 });
        gt[B_1].row_mut(0).scaled_add(1.0, &dh1);
        outer_add(&mut gt[W_1], &fw.u, &dh1);
        let du = da + p[W_1].dot(&dh1);

        let (dg1, rest) = gt.split_at_mut(LN1_B);
        let dr = layer_norm_backward(&du, &fw.ln1, p[LN1_G].row(0), &mut dg1[LN1_G], &mut rest[0]);

        gt[E_EX].row_mut(fw.skill).scaled_add(1.0, &dr);
        outer_add(&mut gt[W_O], &fw.o, &dr);
        let d_o = p[W_O].dot(&dr);

        let mut dq = Array1::<f64>::zeros(self.config.embed_dim);
        for (h, w) in fw.weights.iter().enumerate() {
            let (a, b) = (h * dh, (h + 1) * dh);
            let hs = s![a..b];
            let doh = d_o.slice(hs);
            let qh = fw.q.slice(hs);
            let dw: Vec<f64> = (fw.lo..=i)
                .map(|m| doh.dot(&sh.vz.slice(s![m - sh.m_lo, a..b])) + doh.dot(&sh.vp.slice(s![i - m, a..b])))
                .collect();
            let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for (j, m) in (fw.lo..=i).enumerate() {
                let zr = m - sh.m_lo;
                let pr = i - m;
                dsh.vz.slice_mut(s![zr, a..b]).scaled_add(w[j], &doh);
                dsh.vp.slice_mut(s![pr, a..b]).scaled_add(w[j], &doh);
                let ds = w[j] * (dw[j] - dot) * scale;
                let mut dqh = dq.slice_mut(hs);
                dqh.scaled_add(ds, &sh.kz.slice(s![zr, a..b]));
                dqh.scaled_add(ds, &sh.kp.slice(s![pr, a..b]));
                dsh.kz.slice_mut(s![zr, a..b]).scaled_add(ds, &qh);
                dsh.kp.slice_mut(s![pr, a..b]).scaled_add(ds, &qh);
            }
        }
        outer_add(&mut gt[W_Q], &p[E_EX].row(fw.skill).to_owned(), &dq);
        let dex = p[W_Q].dot(&dq);
        gt[E_EX].row_mut(fw.skill).scaled_add(1.0, &dex);
    }

    fn shared_backward(&self, sh: &Shared, dsh: &SharedGrad, grad: &mut ParamSet) {
        let p = &self.params.tensors;
        let gt = &mut grad.tensors;
        general_mat_mul(1.0, &sh.xz.t(), &dsh.kz, 1.0, &mut gt[W_K]);
        general_mat_mul(1.0, &p[POS].t(), &dsh.kp, 1.0, &mut gt[W_K]);
        general_mat_mul(1.0, &sh.xz.t(), &dsh.vz, 1.0, &mut gt[W_V]);
        general_mat_mul(1.0, &p[POS].t(), &dsh.vp, 1.0, &mut gt[W_V]);
        let dxz = dsh.kz.dot(&p[W_K].t()) + dsh.vz.dot(&p[W_V].t());
        for (r, row) in sh.rows.iter().enumerate() {
            if let Some(idx) = row {
                gt[E_INT].row_mut(*idx).scaled_add(1.0, &dxz.row(r));
            }
        }
        general_mat_mul(1.0, &dsh.kp, &p[W_K].t(), 1.0, &mut gt[POS]);
        general_mat_mul(1.0, &dsh.vp, &p[W_V].t(), 1.0, &mut gt[POS]);
    }

    /// Loss over queries `[start, end)` and, when `grad` is given, its
    /// gradient. Unknown skills score 0.5 and are excluded from the loss.
    fn run_unit(&self, u: &Unit<'_>, mut grad: Option<&mut ParamSet>) -> (f64, usize) {
        if u.start >= u.end {
            return (0.0, 0);
        }
        let m_lo = self.window_start(u.start);
        let sh = self.prepare(u.tokens, m_lo, u.end);
        let mut dsh = grad.as_ref().map(|_| SharedGrad {
            kz: Array2::zeros(sh.kz.raw_dim()),
            vz: Array2::zeros(sh.vz.raw_dim()),
            kp: Array2::zeros(sh.kp.raw_dim()),
            vp: Array2::zeros(sh.vp.raw_dim()),
        });
        let (mut loss, mut count) = (0.0, 0);
        for i in u.start..u.end {
            let Some(fw) = self.query(&sh, u.tokens, i) else {
                continue;
            };
            let y = if u.tokens[i].correct { 1.0 } else { 0.0 };
            loss += bce_with_logit(fw.logit, y);
            count += 1;
            if let (Some(g), Some(d)) = (grad.as_deref_mut(), dsh.as_mut()) {
                self.query_backward(&fw, sigmoid(fw.logit) - y, &sh, d, g);
            }
        }
        if let (Some(g), Some(d)) = (grad, dsh.as_ref()) {
            self.shared_backward(&sh, d, g);
        }
        (loss, count)
    }

    pub fn predict_tokens(&self, toks: &[Token]) -> Vec<f64> {
        if toks.is_empty() {
            return Vec::new();
        }
        let sh = self.prepare(toks, 0, toks.len());
        (0..toks.len())
            .map(|i| self.query(&sh, toks, i).map_or(0.5, |fw| sigmoid(fw.logit)))
            .collect()
    }

    /// Per-head attention weights of query `i` over keys
    /// `window_start(i)..=i`, or `None` for an unknown skill.
    pub fn attention_weights(&self, toks: &[Token], i: usize) -> Option<Vec<Vec<f64>>> {
        let lo = self.window_start(i);
        let sh = self.prepare(toks, lo, i + 1);
        self.query(&sh, toks, i)
            .map(|fw| fw.weights.into_iter().map(|w| w.to_vec()).collect())
    }

    fn units<'a>(&self, seqs: &'a [Vec<Token>]) -> Vec<Unit<'a>> {
        let w = self.config.window;
        seqs.iter()
            .flat_map(|s| {
                (0..s.len()).step_by(w).map(move |start| Unit {
                    tokens: s,
                    start,
                    end: (start + w).min(s.len()),
                })
            })
            .collect()
    }
}

impl NeuralModel for SaktModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, units: &[Unit<'_>]) -> (f64, usize, ParamSet) {
        let mut grad = self.params.zeros_like();
        let (mut loss, mut count) = (0.0, 0);
        for u in units {
            let (l, c) = self.run_unit(u, Some(&mut grad));
            loss += l;
            count += c;
        }
        (loss, count, grad)
    }

    fn loss(&self, units: &[Unit<'_>]) -> (f64, usize) {
        units.iter().fold((0.0, 0), |(l, c), u| {
            let (ul, uc) = self.run_unit(u, None);
            (l + ul, c + uc)
        })
    }
}

pub fn fit_sakt_traced(train_set: &Dataset, config: &SaktConfig) -> Result<(SaktModel, TrainReport), NeuralError> {
    let n_skills = check_vocab(train_set)?;
    let mut model = SaktModel::new(config.clone(), n_skills)?;
    let seqs: Vec<Vec<Token>> = train_set.sequences.iter().map(tokens).collect();
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

pub fn fit_sakt(train_set: &Dataset, config: &SaktConfig) -> Result<SaktModel, NeuralError> {
    fit_sakt_traced(train_set, config).map(|(m, _)| m)
}

pub fn sakt_predict_sequence(model: &SaktModel, seq: &StudentSequence) -> Vec<Prediction> {
    model
        .predict_tokens(&tokens(seq))
        .into_iter()
        .map(Prediction::from_probability)
        .collect()
}

impl SequencePredictor for SaktModel {
    fn predict_sequence(&self, seq: &StudentSequence) -> Vec<Prediction> {
        sakt_predict_sequence(self, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;

    fn tiny(heads: usize, window: usize) -> SaktModel {
        let cfg = SaktConfig {
            embed_dim: 8,
            num_heads: heads,
            window,
            seed: 5,
            ..SaktConfig::default()
        };
        let mut m = SaktModel::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for idx in [W_OUT, B_OUT, LN1_B, LN2_B, B_1] {
            m.params.tensors[idx].mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        m
    }

    fn toks(v: &[(usize, bool)]) -> Vec<Token> {
        v.iter().map(|&(skill, correct)| Token { skill, correct }).collect()
    }

    fn sample() -> Vec<Token> {
        toks(&[
            (0, true),
            (1, false),
            (2, true),
            (0, false),
            (1, true),
            (2, false),
            (0, true),
        ])
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = SaktConfig {
            embed_dim: 10,
            num_heads: 4,
            ..SaktConfig::default()
        };
        assert!(matches!(SaktModel::new(cfg, 3), Err(NeuralError::InvalidConfig(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = tiny(2, 4);
        let t = sample();
        for i in 0..t.len() {
            let w = m.attention_weights(&t, i).unwrap();
            assert_eq!(w.len(), 2);
            for head in w {
                assert_eq!(head.len(), i + 1 - m.window_start(i));
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(head.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn causal_perturbation() {
        let m = tiny(2, 3);
        let base = sample();
        let p0 = m.predict_tokens(&base);
        for i in 0..base.len() {
            let mut flipped = base.clone();
            flipped[i].correct = !flipped[i].correct;
            let p1 = m.predict_tokens(&flipped);
            assert_eq!(&p0[..=i], &p1[..=i]);
        }
        // beyond the window a change is invisible too
        let mut far = base.clone();
        far[0].correct = !far[0].correct;
        let p2 = m.predict_tokens(&far);
        assert_eq!(p0[4..], p2[4..]);
    }

    #[test]
    fn unit_range_matches_full_prediction() {
        let m = tiny(1, 3);
        let t = sample();
        let full: f64 = {
            let p = m.predict_tokens(&t);
            p.iter()
                .zip(&t)
                .map(|(&p, tk)| if tk.correct { -p.ln() } else { -(1.0 - p).ln() })
                .sum()
        };
        let split = m.loss(&[
            Unit {
                tokens: &t,
                start: 0,
                end: 3,
            },
            Unit {
                tokens: &t,
                start: 3,
                end: 7,
            },
        ]);
        assert_eq!(split.1, 7);
        assert!((split.0 - full).abs() < 1e-9);
    }

    #[test]
    fn tiny_gradient_check() {
        let m = tiny(1, 4);
        let t = sample();
        let t2 = toks(&[(2, false), (2, true), (1, true)]);
        let units = [
            Unit {
                tokens: &t,
                start: 0,
                end: 4,
            },
            Unit {
                tokens: &t,
                start: 4,
                end: 7,
            },
            Unit::whole(&t2),
        ];
        let report = grad_check(&m, &units, 1e-4);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let m2 = tiny(2, 4);
        let report = grad_check(&m2, &units, 1e-4);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
