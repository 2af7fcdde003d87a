//! Acceptance suite. `acceptance_suite` runs every criterion that needs no
//! external data and prints one line per criterion; the dataset-backed ones
//! run under `cargo test --test acceptance -- --ignored` with `KT_DATA_DIR`
//! pointing at a directory of experiment configs (see README).

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kt_core::baselines::{fit_mean, NaiveKind, NaiveModel};
use kt_core::bkt::{em_fit, fit_bkt, log_likelihood, skill_observations, BktParams, EmConfig};
use kt_core::dataset::{
    generate_synthetic, parse_interactions, ColumnMapping, Dataset, SkillSampling, StudentSequence,
};
use kt_core::features::{best_lr_vector, sequence_features, FeatureConfig, FeatureSpace, HistoryFeatures};
use kt_core::harness::{
    emit_table, prepare_data, run_experiment, run_experiment_with_backend, BackendKind, ExperimentConfig, ModelEntry,
    ModelKind, ResultsTable, TableFormat,
};
use kt_core::llm::{
    build_zero_shot_request, mock_backend, normalize_logprobs, predict_many, render_prompt, space_digits,
    unspace_digits, ClientSettings, LlmClient, LlmError, LlmMode, PromptOptions, PromptTemplate, RecordingBackend,
    TokenLogprobs,
};
use kt_core::logreg::{fit_best_lr, lr_gradient, lr_loss, LrConfig};
use kt_core::metrics::{auc, metric_report};
use kt_core::neural::{fit_dkt, fit_sakt, grad_check, DktConfig, DktModel, SaktConfig, SaktModel, Token, Unit};
use kt_core::prediction::{Prediction, SequencePredictor};
use kt_core::{ItemId, SkillId};

const DATA_DESCRIPTIONS: [(u32, &str); 7] = [
    (1, "degenerate-student removal rates"),
    (2, "mean baseline constants"),
    (3, "NaP / NaP Skills AUC"),
    (4, "BKT AUC"),
    (5, "Best-LR AUC"),
    (6, "DKT / SAKT AUC"),
    (7, "RMSE and balanced accuracy"),
];

type Check = fn() -> Result<(), String>;

const OFFLINE: [(u32, &str, Check); 7] = [
    (8, "metric oracle equivalence", metric_oracles),
    (9, "BKT EM monotonicity and parameter recovery", bkt_em),
    (10, "analytic gradients match finite differences", gradient_checks),
    (11, "prompt golden files and digit splitting", prompt_goldens),
    (12, "logprob normalization", logprob_normalization),
    (13, "mock backend end to end and replay determinism", mock_end_to_end),
    (14, "causality: later labels never move earlier predictions", causality),
];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_check(f: Check) -> Result<(), String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

#[test]
fn acceptance_suite() {
    let data_dir = std::env::var_os("KT_DATA_DIR");
    for (id, what) in DATA_DESCRIPTIONS {
        let status = if data_dir.is_some() {
            "DEFERRED (run with --ignored)"
        } else {
            "BLOCKED (KT_DATA_DIR unset)"
        };
        println!("criterion {id:02} {status}: {what}");
    }
    let mut failed = Vec::new();
    for (id, what, check) in OFFLINE {
        match run_check(check) {
            Ok(()) => println!("criterion {id:02} PASS: {what}"),
            Err(e) => {
                println!("criterion {id:02} FAIL: {what}: {e}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---- 8 ----------------------------------------------------------------

fn brute_auc(labels: &[bool], s: &[f64]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn div0(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// `[auc, f1, rmse, acc, bal_acc, precision, recall]` by direct counting.
fn brute_metrics(labels: &[bool], p: &[f64]) -> [f64; 7] {
    let (mut tp, mut tn, mut fp, mut fne) = (0.0, 0.0, 0.0, 0.0);
    let mut sq = 0.0;
    for (&y, &q) in labels.iter().zip(p) {
        let hat = q >= 0.5;
        match (y, hat) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fne += 1.0,
        }
        let t = if y { 1.0 } else { 0.0 };
        sq += (t - q) * (t - q);
    }
    let precision = div0(tp, tp + fp);
    let recall = div0(tp, tp + fne);
    let spec = div0(tn, tn + fp);
    [
        brute_auc(labels, p),
        div0(2.0 * tp, 2.0 * tp + fp + fne),
        (sq / labels.len() as f64).sqrt(),
        (tp + tn) / labels.len() as f64,
        (recall + spec) / 2.0,
        precision,
        recall,
    ]
}

fn metric_oracles() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for inst in 0..200 {
        let n = rng.random_range(2..300);
        let coarse = inst % 2 == 0;
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        labels[0] = true;
        labels[1] = false;
        let probs: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                if coarse {
                    (x * 20.0).round() / 20.0
                } else {
                    x
                }
            })
            .collect();
        let preds: Vec<Prediction> = probs.iter().map(|&p| Prediction::from_probability(p)).collect();
        let r = metric_report(&labels, &preds, 0).map_err(|e| e.to_string())?;
        let got = [
            r.auc,
            r.f1,
            r.rmse,
            r.accuracy,
            r.balanced_accuracy,
            r.precision,
            r.recall,
        ];
        let want = brute_metrics(&labels, &probs);
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            ensure((g - w).abs() <= 1e-12, || {
                format!("instance {inst} metric {k}: {g} vs {w}")
            })?;
        }
        for transform in [|x: f64| x.powi(3), |x: f64| (5.0 * x).exp(), |x: f64| 2.0 * x - 7.0] {
            let t: Vec<f64> = probs.iter().map(|&x| transform(x)).collect();
            let a = auc(&labels, &t).map_err(|e| e.to_string())?;
            ensure((a - r.auc).abs() <= 1e-12, || {
                format!("instance {inst}: AUC moved under a monotone map")
            })?;
        }
    }
    Ok(())
}

// ---- 9 ----------------------------------------------------------------

fn bkt_em() -> Result<(), String> {
    let truth = BktParams::new(0.3, 0.2, 0.1, 0.1).map_err(|e| e.to_string())?;
    let params = BTreeMap::from([(0u32, truth)]);
    for seed in 0..5u64 {
        let d = generate_synthetic(&params, 500, 50, SkillSampling::Uniform, seed).map_err(|e| e.to_string())?;
        let obs = skill_observations(&d);
        let seqs = obs.values().next().ok_or("no skill observed")?;
        let fit = em_fit(seqs, &EmConfig::default(), seed).map_err(|e| e.to_string())?;
        for w in fit.trace.windows(2) {
            ensure(w[1] >= w[0] - 1e-9, || {
                format!("seed {seed}: log-likelihood fell {} -> {}", w[0], w[1])
            })?;
        }
        // the fit must be at least as likely as the generating parameters
        let at_truth = log_likelihood(seqs, &truth);
        ensure(fit.log_likelihood >= at_truth - 1e-6, || {
            format!("seed {seed}: fit {} below truth {at_truth}", fit.log_likelihood)
        })?;
        let got = [
            fit.params.p_init,
            fit.params.p_learn,
            fit.params.p_guess,
            fit.params.p_slip,
        ];
        let want = [0.3, 0.2, 0.1, 0.1];
        for (g, w) in got.iter().zip(want) {
            ensure((g - w).abs() <= 0.05, || format!("seed {seed}: recovered {got:?}"))?;
        }
    }
    Ok(())
}

// ---- 10 ---------------------------------------------------------------

fn lr_grad_check() -> Result<f64, String> {
    let space = FeatureSpace::new(
        FeatureConfig {
            item_onehot: true,
            ..FeatureConfig::default()
        },
        4,
        6,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let batch: Vec<_> = (0..40)
        .map(|i| {
            let f = HistoryFeatures {
                question_id: ItemId(rng.random_range(0..6)),
                skill_id: SkillId(rng.random_range(0..4)),
                total_correct: rng.random_range(0..30),
                total_wrong: rng.random_range(0..30),
                skill_correct: rng.random_range(0..10),
                skill_wrong: rng.random_range(0..10),
                position: i,
            };
            (
                best_lr_vector(&f, &space).unwrap(),
                f64::from(rng.random_bool(0.5) as u8),
            )
        })
        .collect();
    let w: Vec<f64> = (0..space.dimension()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lambda = 1e-2;
    let g = lr_gradient(&w, &batch, lambda);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..w.len() {
        let mut up = w.clone();
        let mut down = w.clone();
        up[k] += h;
        down[k] -= h;
        let num = (lr_loss(&up, &batch, lambda) - lr_loss(&down, &batch, lambda)) / (2.0 * h);
        worst = worst.max((g[k] - num).abs() / g[k].abs().max(num.abs()).max(1e-6));
    }
    Ok(worst)
}

fn toks(v: &[(usize, bool)]) -> Vec<Token> {
    v.iter().map(|&(skill, correct)| Token { skill, correct }).collect()
}

fn jitter(tensors: &mut [ndarray::Array2<f64>], idx: &[usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &i in idx {
        tensors[i].mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
    }
}

/// Central-difference step for the neural checks. At 1e-4 a step can cross
/// a ReLU kink in the SAKT feed-forward block.
const NEURAL_STEP: f64 = 1e-5;

fn gradient_checks() -> Result<(), String> {
    let lr = lr_grad_check()?;
    ensure(lr < 1e-5, || format!("logreg max relative error {lr:e}"))?;

    let a = toks(&[
        (0, true),
        (1, false),
        (2, true),
        (0, false),
        (1, true),
        (1, true),
        (2, false),
    ]);
    let b = toks(&[(2, false), (2, true), (1, true), (0, true)]);

    let mut dkt = DktModel::new(
        DktConfig {
            hidden_size: 5,
            seed: 21,
            ..DktConfig::default()
        },
        3,
    )
    .map_err(|e| e.to_string())?;
    let idx = |names: &[String], wanted: &[&str]| -> Vec<usize> {
        wanted
            .iter()
            .map(|w| names.iter().position(|n| n == w).unwrap())
            .collect()
    };
    let which = idx(&dkt.params.names, &["b", "w_y", "b_y"]);
    jitter(&mut dkt.params.tensors, &which, 22);
    let units = [Unit::whole(&a), Unit::whole(&b)];
    let r = grad_check(&dkt, &units, NEURAL_STEP);
    ensure(r.all_finite && r.max_rel_error < 1e-4, || format!("DKT: {r:?}"))?;

    for heads in [1, 2] {
        let mut sakt = SaktModel::new(
            SaktConfig {
                embed_dim: 8,
                num_heads: heads,
                window: 3,
                seed: 23,
                ..SaktConfig::default()
            },
            3,
        )
        .map_err(|e| e.to_string())?;
        let which = idx(&sakt.params.names, &["w_out", "b_out", "ln1_b", "ln2_b", "b_1", "b_2"]);
        jitter(&mut sakt.params.tensors, &which, 24);
        let units = [
            Unit {
                tokens: &a,
                start: 0,
                end: 3,
            },
            Unit {
                tokens: &a,
                start: 3,
                end: 7,
            },
            Unit::whole(&b),
        ];
        let r = grad_check(&sakt, &units, NEURAL_STEP);
        ensure(r.all_finite && r.max_rel_error < 1e-4, || {
            format!("SAKT ({heads} heads): {r:?}")
        })?;
    }
    Ok(())
}

// ---- 11 ---------------------------------------------------------------

fn fixture(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn prompt_goldens() -> Result<(), String> {
    let f = HistoryFeatures {
        question_id: ItemId(342),
        skill_id: SkillId(15),
        total_correct: 12,
        total_wrong: 7,
        skill_correct: 3,
        skill_wrong: 0,
        position: 19,
    };
    let opts = PromptOptions::default();
    ensure(
        render_prompt(PromptTemplate::Minimal, &f, opts) == fixture("minimal_prompt.txt"),
        || "minimal prompt differs from fixture".into(),
    )?;
    ensure(
        render_prompt(PromptTemplate::Extended, &f, opts) == fixture("extended_prompt.txt"),
        || "extended prompt differs from fixture".into(),
    )?;
    let chat = build_zero_shot_request(&f);
    ensure(chat.system_message == fixture("system_message.txt"), || {
        "system message differs from fixture".into()
    })?;
    ensure(chat.user_message == fixture("minimal_prompt.txt"), || {
        "zero-shot user message differs".into()
    })?;

    for n in 0..10_000_000u64 {
        let s = space_digits(n);
        let digits = n.to_string();
        if s.len() != 2 * digits.len() - 1 || s.replace(' ', "") != digits {
            return Err(format!("{n} spaced as `{s}`"));
        }
        if n % 7919 == 0 || n < 1000 {
            ensure(unspace_digits(&s) == Some(n), || format!("{n} did not round-trip"))?;
        }
    }
    Ok(())
}

// ---- 12 ---------------------------------------------------------------

fn logprob_normalization() -> Result<(), String> {
    let lp = |pairs: &[(&str, f64)]| -> TokenLogprobs { pairs.iter().map(|&(t, p)| (t.to_string(), p.ln())).collect() };
    let p = normalize_logprobs(&lp(&[("C", 0.3), ("COR", 0.3), ("W", 0.2)])).map_err(|e| e.to_string())?;
    ensure((p - 0.75).abs() < 1e-12, || format!("worked example gave {p}"))?;
    ensure(
        matches!(
            normalize_logprobs(&lp(&[("maybe", 0.5), ("The", 0.3)])),
            Err(LlmError::NoSignal)
        ),
        || "disjoint tokens did not give NoSignal".into(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let vocab = ["C", "CORRECT", " W", "WRONG", "wr", "cor", "x", "Yes"];
    for _ in 0..2000 {
        let mut pairs: Vec<(&str, f64)> = Vec::new();
        for t in vocab {
            if rng.random_bool(0.6) {
                pairs.push((t, rng.random_range(1e-9..1.0)));
            }
        }
        match normalize_logprobs(&lp(&pairs)) {
            Ok(p) => ensure((0.0..=1.0).contains(&p), || format!("{p} outside [0, 1]"))?,
            Err(LlmError::NoSignal) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(())
}

// ---- 13 ---------------------------------------------------------------

fn synthetic_csv(dir: &Path) -> PathBuf {
    let params = BTreeMap::from([
        (0u32, BktParams::new(0.3, 0.2, 0.1, 0.1).unwrap()),
        (1u32, BktParams::new(0.5, 0.1, 0.2, 0.1).unwrap()),
        (2u32, BktParams::new(0.2, 0.3, 0.25, 0.05).unwrap()),
    ]);
    let d = generate_synthetic(&params, 40, 15, SkillSampling::Uniform, 13).unwrap();
    let mut text = String::from("user_id,item_id,skill_id,correct\n");
    for s in &d.sequences {
        for r in &s.records {
            text += &format!(
                "u{},q{},s{},{}\n",
                s.user_id.0,
                r.item_id.0,
                r.skill_id.0,
                u8::from(r.correct)
            );
        }
    }
    let path = dir.join("synthetic.csv");
    fs::write(&path, text).unwrap();
    path
}

fn full_config(dir: &Path) -> ExperimentConfig {
    let csv = synthetic_csv(dir);
    let mut text = format!(
        "seed = 13\n[dataset]\nname = \"synthetic\"\npath = \"{}\"\n[split]\nmode = \"seeded\"\n",
        csv.display()
    );
    for kind in ModelKind::ALL {
        text += &format!("\n[[models]]\nkind = \"{}\"\n", kind.slug());
        match kind {
            ModelKind::Dkt => text += "params = { hidden_size = 8, epochs = 2 }\n",
            ModelKind::Sakt => text += "params = { embed_dim = 8, num_heads = 2, window = 10, epochs = 2 }\n",
            _ => {}
        }
    }
    ExperimentConfig::from_toml(&text).unwrap()
}

fn metric_rows(t: &ResultsTable) -> Vec<Option<[f64; 7]>> {
    t.rows.iter().map(|r| r.metric_values()).collect()
}

fn mock_end_to_end() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = full_config(dir.path());
    let t = run_experiment(&cfg).map_err(|e| e.to_string())?;
    ensure(t.rows.len() == ModelKind::ALL.len(), || {
        format!("{} rows", t.rows.len())
    })?;
    for r in &t.rows {
        ensure(r.outcome.is_ok(), || format!("{} failed: {:?}", r.model, r.outcome))?;
    }
    let md = emit_table(&t, TableFormat::Markdown);
    ensure(!md.contains('—'), || "markdown table has placeholders".into())?;

    let data = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let w = cfg.llm.mock_weights;
    let mock = mock_backend(w);
    let client = LlmClient::new(&mock, ClientSettings::default());
    let points: Vec<HistoryFeatures> = data.test.sequences.iter().flat_map(sequence_features).collect();
    for (mode, use_skill) in [
        (LlmMode::Finetuned(PromptTemplate::Minimal), false),
        (LlmMode::Finetuned(PromptTemplate::Extended), true),
    ] {
        let got = predict_many(&client, mode, &points).map_err(|e| e.to_string())?;
        for (f, p) in points.iter().zip(got) {
            let p = p.map_err(|e| e.to_string())?.p_correct;
            let mut z = w[0] * f.total_correct as f64 + w[1] * f.total_wrong as f64;
            if use_skill {
                z += w[2] * f.skill_correct as f64 + w[3] * f.skill_wrong as f64;
            }
            let want = 1.0 / (1.0 + (-z).exp());
            ensure((p - want).abs() <= 1e-9, || {
                format!("{mode:?}: {p} vs closed form {want}")
            })?;
        }
    }

    let recorder = RecordingBackend::new(mock_backend(w));
    let live = run_experiment_with_backend(&cfg, Some(&recorder)).map_err(|e| e.to_string())?;
    let replay = dir.path().join("replay.jsonl");
    recorder
        .save(fs::File::create(&replay).unwrap())
        .map_err(|e| e.to_string())?;
    cfg.llm.backend = BackendKind::Replay;
    cfg.llm.replay_file = Some(replay);
    let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let bits = |t: &ResultsTable| -> Vec<Option<Vec<u64>>> {
        metric_rows(t)
            .into_iter()
            .map(|r| r.map(|v| v.iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    ensure(bits(&a) == bits(&b), || "replay reruns differ".into())?;
    ensure(bits(&a) == bits(&live), || {
        "replay differs from the recorded run".into()
    })?;
    Ok(())
}

// ---- 14 ---------------------------------------------------------------

type Predict<'a> = Box<dyn Fn(&StudentSequence) -> Vec<f64> + 'a>;

fn probs(m: &dyn SequencePredictor, s: &StudentSequence) -> Vec<f64> {
    m.predict_sequence(s).iter().map(|p| p.p_correct).collect()
}

fn causality() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let csv = fs::read(synthetic_csv(dir.path())).unwrap();
    let train: Dataset = parse_interactions("synthetic", &csv, &ColumnMapping::default()).unwrap();
    let mean = fit_mean(&train).map_err(|e| e.to_string())?;
    let bkt = fit_bkt(&train, &EmConfig::default()).map_err(|e| e.to_string())?;
    let lr = fit_best_lr(&train, &LrConfig::default()).map_err(|e| e.to_string())?;
    let dkt = fit_dkt(
        &train,
        &DktConfig {
            hidden_size: 8,
            epochs: 3,
            ..DktConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let sakt = fit_sakt(
        &train,
        &SaktConfig {
            embed_dim: 8,
            num_heads: 2,
            window: 6,
            epochs: 3,
            ..SaktConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mock = mock_backend([0.3, -0.2, 0.5, -0.4]);
    let client = LlmClient::new(&mock, ClientSettings::default());
    let llm = |mode: LlmMode| -> Predict<'_> {
        let client = &client;
        Box::new(move |s: &StudentSequence| {
            predict_many(client, mode, &sequence_features(s))
                .unwrap()
                .into_iter()
                .map(|p| p.unwrap().p_correct)
                .collect()
        })
    };
    let naive = |kind| NaiveModel { kind, mean };
    let (m0, m1, m2) = (
        naive(NaiveKind::Mean),
        naive(NaiveKind::Nap),
        naive(NaiveKind::NapSkills),
    );
    let models: Vec<(&str, Predict<'_>)> = vec![
        ("Mean", Box::new(|s| probs(&m0, s))),
        ("NaP", Box::new(|s| probs(&m1, s))),
        ("NaP Skills", Box::new(|s| probs(&m2, s))),
        ("BKT", Box::new(|s| probs(&bkt, s))),
        ("Best-LR", Box::new(|s| probs(&lr, s))),
        ("DKT", Box::new(|s| probs(&dkt, s))),
        ("SAKT", Box::new(|s| probs(&sakt, s))),
        ("FT Min", llm(LlmMode::Finetuned(PromptTemplate::Minimal))),
        ("FT Ext", llm(LlmMode::Finetuned(PromptTemplate::Extended))),
        ("0-Shot", llm(LlmMode::ZeroShot)),
    ];
    for (name, predict) in &models {
        let mut moved_later = false;
        for seq in train.sequences.iter().take(6) {
            let base = predict(seq);
            for i in 0..seq.len() {
                let mut flipped = seq.clone();
                flipped.records[i].correct ^= true;
                let after = predict(&flipped);
                ensure(after.len() == base.len(), || {
                    format!("{name}: prediction count changed")
                })?;
                for j in 0..=i {
                    ensure(after[j].to_bits() == base[j].to_bits(), || {
                        format!("{name}: flipping step {i} moved the prediction at step {j}")
                    })?;
                }
                moved_later |= after[i + 1..] != base[i + 1..];
            }
        }
        ensure(*name == "Mean" || moved_later, || {
            format!("{name}: predictions never depend on history")
        })?;
    }
    Ok(())
}

// ---- 1-7 --------------------------------------------------------------

struct Expected {
    file: &'static str,
    removed: f64,
    /// `(model, AUC, AUC tolerance, RMSE, balanced accuracy)`.
    rows: [(ModelKind, f64, f64, f64, f64); 7],
    positive_majority: bool,
}

const EXPECTED: [Expected; 3] = [
    Expected {
        file: "statics.toml",
        removed: 0.018,
        rows: [
            (ModelKind::Mean, 0.50, 0.0, 0.42, 0.50),
            (ModelKind::Nap, 0.61, 0.02, 0.41, 0.50),
            (ModelKind::NapSkills, 0.63, 0.02, 0.44, 0.55),
            (ModelKind::Bkt, 0.67, 0.03, 0.40, 0.53),
            (ModelKind::BestLr, 0.83, 0.02, 0.36, 0.65),
            (ModelKind::Dkt, 0.83, 0.03, 0.36, 0.68),
            (ModelKind::Sakt, 0.82, 0.03, 0.36, 0.67),
        ],
        positive_majority: true,
    },
    Expected {
        file: "assist09.toml",
        removed: 0.050,
        rows: [
            (ModelKind::Mean, 0.50, 0.0, 0.47, 0.50),
            (ModelKind::Nap, 0.65, 0.02, 0.46, 0.58),
            (ModelKind::NapSkills, 0.68, 0.02, 0.49, 0.63),
            (ModelKind::Bkt, 0.71, 0.03, 0.44, 0.62),
            (ModelKind::BestLr, 0.76, 0.02, 0.42, 0.66),
            (ModelKind::Dkt, 0.75, 0.03, 0.43, 0.66),
            (ModelKind::Sakt, 0.72, 0.03, 0.45, 0.65),
        ],
        positive_majority: true,
    },
    Expected {
        file: "assist17.toml",
        removed: 0.0,
        rows: [
            (ModelKind::Mean, 0.50, 0.0, 0.48, 0.50),
            (ModelKind::Nap, 0.60, 0.02, 0.48, 0.55),
            (ModelKind::NapSkills, 0.59, 0.02, 0.51, 0.56),
            (ModelKind::Bkt, 0.63, 0.03, 0.47, 0.55),
            (ModelKind::BestLr, 0.70, 0.02, 0.45, 0.63),
            (ModelKind::Dkt, 0.77, 0.03, 0.42, 0.68),
            (ModelKind::Sakt, 0.70, 0.03, 0.46, 0.63),
        ],
        positive_majority: false,
    },
];

fn criterion_for(kind: ModelKind) -> u32 {
    match kind {
        ModelKind::Mean => 2,
        ModelKind::Nap | ModelKind::NapSkills => 3,
        ModelKind::Bkt => 4,
        ModelKind::BestLr => 5,
        _ => 6,
    }
}

/// Each `<KT_DATA_DIR>/<dataset>.toml` is an experiment config (external
/// split, paths relative to the file). Its model list is replaced by the
/// seven non-LLM models, keeping any params it gives them.
#[test]
#[ignore = "requires public dataset exports in KT_DATA_DIR"]
fn dataset_criteria() {
    let dir = PathBuf::from(std::env::var_os("KT_DATA_DIR").expect("KT_DATA_DIR must be set"));
    let mut failures: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for exp in &EXPECTED {
        let mut cfg = ExperimentConfig::load(&dir.join(exp.file)).unwrap();
        cfg.models = exp
            .rows
            .iter()
            .map(|(kind, ..)| {
                cfg.models
                    .iter()
                    .find(|m| m.kind == *kind)
                    .cloned()
                    .unwrap_or(ModelEntry {
                        kind: *kind,
                        params: Default::default(),
                        budget_secs: None,
                        abort_on_budget: false,
                    })
            })
            .collect();
        let t = run_experiment(&cfg).unwrap();
        let mut fail = |c: u32, msg: String| failures.entry(c).or_default().push(format!("{}: {msg}", exp.file));

        let removed = t.filter.as_ref().unwrap().removed_fraction;
        if (removed - exp.removed).abs() > 0.001 {
            fail(1, format!("removed {removed:.4}, expected {}", exp.removed));
        }
        for ((kind, want_auc, tol, want_rmse, want_bal), row) in exp.rows.iter().zip(&t.rows) {
            let c = criterion_for(*kind);
            let m = match &row.outcome {
                Ok(m) => m,
                Err(e) => {
                    fail(c, format!("{} failed: {e}", row.model));
                    continue;
                }
            };
            if (m.auc - want_auc).abs() > *tol + 1e-12 {
                fail(
                    c,
                    format!("{} AUC {:.4}, expected {want_auc} ± {tol}", row.model, m.auc),
                );
            }
            if *kind == ModelKind::Mean {
                let ok = if exp.positive_majority {
                    m.recall == 1.0
                } else {
                    m.precision == 0.0 && m.recall == 0.0 && m.f1 == 0.0
                };
                if !ok || m.balanced_accuracy != 0.5 {
                    fail(2, format!("Mean constants off: {m:?}"));
                }
            }
            if (m.rmse - want_rmse).abs() > 0.02 || (m.balanced_accuracy - want_bal).abs() > 0.02 {
                fail(
                    7,
                    format!(
                        "{} RMSE {:.4} / bal acc {:.4}, expected {want_rmse} / {want_bal}",
                        row.model, m.rmse, m.balanced_accuracy
                    ),
                );
            }
        }
        println!("{}", emit_table(&t, TableFormat::Markdown));
    }
    for (id, what) in DATA_DESCRIPTIONS {
        match failures.get(&id) {
            None => println!("criterion {id:02} PASS: {what}"),
            Some(v) => println!("criterion {id:02} FAIL: {what}: {}", v.join("; ")),
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
