//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails.
//!
//! Criteria 11 to 13 need the OLID release and Twitter GloVe vectors. Point
//! `OFFLANG_OLID_DIR` at a directory holding `olid-training-v1.0.tsv`,
//! `testset-levela.tsv` and `labels-levela.csv`, and `OFFLANG_GLOVE` at a
//! 200-dimensional vector file. Without them those criteria report SKIP.
//! They are slow in debug builds; use `cargo test --release --test acceptance`.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offlang::corpus::{Dataset, Instance, Label};
use offlang::eval::{evaluate, load_predictions, EffectMetric};
use offlang::features::{FeatureBlockSpec, Vocabulary};
use offlang::linear::{train_svm, LinearConfig};
use offlang::losses::{bce, focal, focal_grad, ClassWeights, FocalParams};
use offlang::neural::{
    sequence_loss, sequence_loss_grad, train_neural, CallbackConfig, EmbeddingTable, LossKind, NetworkParams,
    NeuralConfig,
};
use offlang::runner::{apply_preset, compare_predictions, run_experiment, ExperimentConfig, RunReport};
use offlang::sentiment::{
    attach_sentiments, augment_dataset, load_sentiment_file, strip_sentiment, FileSource, LexiconSource,
    Sentiment, SentimentInput,
};
use offlang::textnorm::{normalize, NormConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn outcome(r: Result<String, String>) -> Outcome {
    match r {
        Ok(s) => Outcome::Pass(s),
        Err(s) => Outcome::Fail(s),
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// 1 ---------------------------------------------------------------------------

fn c1_focal_bce_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fp = FocalParams {
        alpha: 1.0,
        gamma: 0.0,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p: f64 = rng.random();
        let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
        worst = worst.max((focal(p, y, fp) - bce(p, y, 1.0)).abs());
    }
    outcome(
        ensure(worst <= 1e-12, format!("max abs diff {worst:e}"))
            .map(|_| format!("max abs diff {worst:e} over 10000 samples")),
    )
}

// 2 ---------------------------------------------------------------------------

/// Focal loss as a function of the logit, written out independently.
fn focal_of_logit(z: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    // for y = 1: p_t = sigmoid(z); for y = 0: p_t = sigmoid(-z)
    let t = if y > 0.5 { z } else { -z };
    let one_minus_pt = 1.0 / (1.0 + t.exp());
    let ln_pt = -softplus(-t);
    -alpha * one_minus_pt.powf(gamma) * ln_pt
}

fn c2_focal_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let z: f64 = rng.random_range(-10.0..10.0);
        let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
        let alpha: f64 = rng.random_range(0.1..2.0);
        let gamma: f64 = rng.random_range(0.0..5.0);
        let numeric =
            (focal_of_logit(z + h, y, alpha, gamma) - focal_of_logit(z - h, y, alpha, gamma)) / (2.0 * h);
        let analytic = focal_grad(z, y, FocalParams { alpha, gamma });
        worst = worst.max(rel_err(analytic, numeric, 1e-300));
    }
    outcome(
        ensure(worst < 1e-6, format!("max rel err {worst:e}"))
            .map(|_| format!("max rel err {worst:e} over 1000 samples")),
    )
}

// 3 ---------------------------------------------------------------------------

fn c3_lstm_gradient() -> Outcome {
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
        let input = 3;
        let mut params = NetworkParams::init(input, 2, 1, false, &mut rng);
        let random: Vec<f64> = (0..params.num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.unflatten(&random).unwrap();
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let seq: Vec<&[f64]> = seq.iter().map(|v| &v[..]).collect();
        let label = if seed % 2 == 0 { Label::Off } else { Label::Not };
        let loss = if seed < 3 {
            LossKind::Bce
        } else {
            LossKind::Focal(FocalParams::default())
        };
        let l2 = if seed == 4 { 0.01 } else { 0.0 };
        let (_, grad) = sequence_loss_grad(&params, &seq, label, loss, 1.0, l2).unwrap();
        let analytic = grad.flatten();
        let mut p = params.clone();
        for k in 0..random.len() {
            let mut v = random.clone();
            v[k] += h;
            p.unflatten(&v).unwrap();
            let up = sequence_loss(&p, &seq, label, loss, 1.0, l2).unwrap();
            v[k] -= 2.0 * h;
            p.unflatten(&v).unwrap();
            let down = sequence_loss(&p, &seq, label, loss, 1.0, l2).unwrap();
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], numeric, 1e-8));
        }
    }
    outcome(
        ensure(worst < 1e-4, format!("max rel err {worst:e}"))
            .map(|_| format!("max rel err {worst:e} over 5 random networks")),
    )
}

// 4 ---------------------------------------------------------------------------

/// (precision, recall, f1) of `class` counted directly.
fn brute_prf(gold: &[bool], pred: &[bool], class: bool) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fnn = 0.0;
    for (&g, &p) in gold.iter().zip(pred) {
        match (g == class, p == class) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fnn += 1.0,
            _ => {}
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fnn);
    (p, r, div(2.0 * p * r, p + r))
}

fn c4_metrics_oracle() -> Outcome {
    let to_label = |b: bool| if b { Label::Off } else { Label::Not };
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=5usize {
        for gmask in 0..(1u32 << n) {
            for pmask in 0..(1u32 << n) {
                let gold: Vec<bool> = (0..n).map(|i| gmask >> i & 1 == 1).collect();
                let pred: Vec<bool> = (0..n).map(|i| pmask >> i & 1 == 1).collect();
                let gl: Vec<Label> = gold.iter().map(|&b| to_label(b)).collect();
                let pl: Vec<Label> = pred.iter().map(|&b| to_label(b)).collect();
                let r = evaluate(&gl, &pl).unwrap();
                let mut f1s = Vec::new();
                for class in [false, true] {
                    let (p, rc, f) = brute_prf(&gold, &pred, class);
                    let m = r.class(to_label(class));
                    worst = worst
                        .max((m.precision - p).abs())
                        .max((m.recall - rc).abs())
                        .max((m.f1 - f).abs());
                    f1s.push(m.f1);
                }
                if r.macro_f1 != (f1s[0] + f1s[1]) / 2.0 {
                    return Outcome::Fail(format!(
                        "macro-F1 is not the mean of per-class F1 for {gold:?} {pred:?}"
                    ));
                }
                cases += 1;
            }
        }
    }
    outcome(
        ensure(worst <= 1e-12, format!("max diff {worst:e}"))
            .map(|_| format!("{cases} sequence pairs, max diff {worst:e}")),
    )
}

// 5 ---------------------------------------------------------------------------

fn oracle_grams(text: &str, spec: &(bool, usize)) -> Vec<String> {
    let (word, n) = *spec;
    let units: Vec<String> = if word {
        text.split_whitespace().map(str::to_string).collect()
    } else {
        text.chars().map(|c| c.to_string()).collect()
    };
    let sep = if word { " " } else { "" };
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= units.len() {
        out.push(units[i..i + n].join(sep));
        i += 1;
    }
    out
}

fn c5_tfidf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let words = ["a", "b", "ab", "ba", "c", "aa"];
    let mut worst: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    for _ in 0..300 {
        let n_docs = rng.random_range(1..=5);
        let docs: Vec<String> = (0..n_docs)
            .map(|_| {
                let len = rng.random_range(1..=6);
                (0..len)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let mut specs: Vec<(bool, usize)> = Vec::new();
        for word in [true, false] {
            for n in 1..=4 {
                if rng.random::<f64>() < 0.3 {
                    specs.push((word, n));
                }
            }
        }
        if specs.is_empty() {
            specs.push((true, 1));
        }
        let blocks: Vec<FeatureBlockSpec> = specs
            .iter()
            .map(|&(w, n)| {
                if w {
                    FeatureBlockSpec::word(n)
                } else {
                    FeatureBlockSpec::char(n)
                }
            })
            .collect();
        let vocab = Vocabulary::build(docs.iter().map(String::as_str), &blocks).unwrap();

        // brute force: document frequencies per block
        let n = docs.len() as f64;
        let mut df: Vec<HashMap<String, usize>> = vec![HashMap::new(); specs.len()];
        for d in &docs {
            for (b, s) in specs.iter().enumerate() {
                let mut seen: Vec<String> = oracle_grams(d, s);
                seen.sort();
                seen.dedup();
                for g in seen {
                    *df[b].entry(g).or_insert(0) += 1;
                }
            }
        }
        let total: usize = df.iter().map(|m| m.len()).sum();
        if total != vocab.dim() {
            return Outcome::Fail(format!("vocabulary size {} vs oracle {}", vocab.dim(), total));
        }
        let query = format!("{} {}", docs[0], words[rng.random_range(0..words.len())]);
        for d in docs.iter().chain(std::iter::once(&query)) {
            let mut raw: Vec<(usize, f64)> = Vec::new();
            for (b, s) in specs.iter().enumerate() {
                let mut tf: HashMap<String, f64> = HashMap::new();
                for g in oracle_grams(d, s) {
                    *tf.entry(g).or_insert(0.0) += 1.0;
                }
                for (g, count) in tf {
                    let Some(&dfg) = df[b].get(&g) else { continue };
                    let idf = ((1.0 + n) / (1.0 + dfg as f64)).ln() + 1.0;
                    let col = vocab.column(b, &g).expect("oracle gram present in vocabulary");
                    raw.push((col, count * idf));
                }
            }
            let norm = raw.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let v = vocab.vectorize(d);
            if v.len() != raw.len() {
                return Outcome::Fail(format!("{} non-zeros vs oracle {}", v.len(), raw.len()));
            }
            for (col, w) in raw {
                worst = worst.max((v.get(col) - w / norm).abs());
            }
            if v.is_empty() {
                // no gram of any block fits in this document
                if norm != 0.0 {
                    return Outcome::Fail(format!("empty vector for {d:?}"));
                }
            } else {
                worst_norm = worst_norm.max((v.norm() - 1.0).abs());
            }
        }
    }
    outcome(
        ensure(
            worst <= 1e-9 && worst_norm <= 1e-9,
            format!("max diff {worst:e}, norm dev {worst_norm:e}"),
        )
        .map(|_| format!("300 corpora, max diff {worst:e}, max |norm-1| {worst_norm:e}")),
    )
}

// 6 ---------------------------------------------------------------------------

fn c6_balanced_weights() -> Outcome {
    let labels: Vec<Label> = std::iter::repeat_n(Label::Not, 9460)
        .chain(std::iter::repeat_n(Label::Off, 4640))
        .collect();
    let w = ClassWeights::balanced_for(&labels).unwrap();
    outcome(
        ensure(
            (w.not - 0.7452).abs() <= 1e-4 && (w.off - 1.5194).abs() <= 1e-4,
            format!("got NOT={:.6} OFF={:.6}", w.not, w.off),
        )
        .map(|_| format!("NOT={:.4} OFF={:.4}", w.not, w.off)),
    )
}

// 7 ---------------------------------------------------------------------------

fn random_tweet(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 16] = [
        "@USER", "@user", "@User", "#", "#MAGA", "soooo", "!!!", "a", "A", "É", "ß", "  ", " ", "ooo", "_",
        "@",
    ];
    const CHARS: [char; 12] = ['a', 'b', 'O', 'o', '!', '#', '@', ' ', 'U', 's', 'é', 'Ü'];
    let len = rng.random_range(0..12);
    let mut s = String::new();
    for _ in 0..len {
        if rng.random::<bool>() {
            s.push_str(PIECES[rng.random_range(0..PIECES.len())]);
        } else {
            s.push(CHARS[rng.random_range(0..CHARS.len())]);
        }
    }
    s
}

fn c7_normalization() -> Outcome {
    let cfg = NormConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let x = random_tweet(&mut rng);
        let y = normalize(&x, &cfg);
        let fail = |why: &str| Outcome::Fail(format!("{why} for {x:?} -> {y:?}"));
        if normalize(&y, &cfg) != y {
            return fail("not idempotent");
        }
        if y.contains('#') {
            return fail("'#' survived");
        }
        if y.to_lowercase() != y {
            return fail("uppercase survived");
        }
        let chars: Vec<char> = y.chars().collect();
        if chars.windows(3).any(|w| w[0] == w[1] && w[1] == w[2]) {
            return fail("run of 3 survived");
        }
        if y.split(' ').any(|t| t == "@user") {
            return fail("mention survived");
        }
    }
    Outcome::Pass("10000 random strings".into())
}

// 8 ---------------------------------------------------------------------------

fn c8_pps_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lex = LexiconSource::new(["good", "great"], ["bad", "awful"]).unwrap();
    for round in 0..200 {
        let n = rng.random_range(0..20);
        let instances: Vec<Instance> = (0..n)
            .map(|i| {
                let label = match rng.random_range(0..3) {
                    0 => None,
                    1 => Some(Label::Off),
                    _ => Some(Label::Not),
                };
                let mut text = random_tweet(&mut rng);
                if rng.random::<bool>() {
                    text.push_str(if rng.random::<bool>() { " good" } else { " bad" });
                }
                if text.trim().is_empty() {
                    text = "x".into();
                }
                Instance::new(format!("id{i}"), text, label)
            })
            .collect();
        let d = Dataset::new("r", instances);
        let map: HashMap<String, Sentiment> = d
            .iter()
            .map(|i| (i.id.clone(), Sentiment::ALL[rng.random_range(0..3)]))
            .collect();
        let file = FileSource::from_map("random", map);
        let src = if round % 2 == 0 {
            SentimentInput::File(&file)
        } else {
            SentimentInput::Predictor(&lex)
        };
        let out = augment_dataset(&d, src).unwrap();
        if out.len() != d.len() {
            return Outcome::Fail("size changed".into());
        }
        for (a, b) in d.iter().zip(out.iter()) {
            let Some((s, rest)) = strip_sentiment(&b.text) else {
                return Outcome::Fail(format!("no sentiment prefix on {:?}", b.text));
            };
            if rest != a.text || a.id != b.id || a.label != b.label || Some(s) != b.sentiment {
                return Outcome::Fail(format!("round trip broke for {:?}", a.id));
            }
        }
    }
    Outcome::Pass("200 random datasets, file and lexicon sources".into())
}

// 9 ---------------------------------------------------------------------------

fn toy_embeddings(vocab: usize, dim: usize) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(dim);
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for k in 0..vocab {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        t.insert(format!("t{k}"), &v).unwrap();
    }
    t
}

fn toy_dataset(n: usize, vocab: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|i| {
            let len = r.random_range(2..6);
            let text: Vec<String> = (0..len)
                .map(|_| format!("t{}", r.random_range(0..vocab)))
                .collect();
            let label = if i % 2 == 0 { Label::Off } else { Label::Not };
            Instance::labeled(format!("{i}"), text.join(" "), label)
        })
        .collect();
    Dataset::new("toy", instances)
}

fn c9_determinism() -> Outcome {
    let train = toy_dataset(40, 15, 9);
    let blocks = [FeatureBlockSpec::word(1), FeatureBlockSpec::char(3)];
    let vocab = Vocabulary::build(train.texts(), &blocks).unwrap();
    let xs = vocab.vectorize_all(train.texts());
    let ys = train.labels().unwrap();
    let cfg = LinearConfig::default();
    let a = train_svm(&xs, &ys, vocab.dim(), &cfg).unwrap();
    let b = train_svm(&xs, &ys, vocab.dim(), &cfg).unwrap();
    if a != b {
        return Outcome::Fail("SVM models differ".into());
    }

    let emb = toy_embeddings(15, 6);
    let ncfg = NeuralConfig {
        layers: 2,
        units: 4,
        bidirectional: true,
        max_epochs: 4,
        batch_size: 8,
        ..Default::default()
    };
    let dev = toy_dataset(10, 15, 10);
    let run = || {
        train_neural(
            &train,
            &dev,
            &emb,
            &ncfg,
            &CallbackConfig::default(),
            LossKind::Bce,
            ClassWeights::uniform(),
        )
        .unwrap()
    };
    let (m1, m2) = (run(), run());
    if m1.history != m2.history || m1.params != m2.params {
        return Outcome::Fail("neural histories or parameters differ".into());
    }
    Outcome::Pass("SVM weights and BiLSTM parameters/history identical across runs".into())
}

// 10 --------------------------------------------------------------------------

fn c10_capacity_and_early_stop() -> Outcome {
    let emb = toy_embeddings(20, 8);
    let train = toy_dataset(32, 20, 4);
    let cfg = NeuralConfig {
        layers: 1,
        units: 16,
        dropout_rate: 0.0,
        l2_lambda: 0.0,
        learning_rate: 0.01,
        batch_size: 8,
        max_epochs: 200,
        seed: 3,
        ..Default::default()
    };
    let m = train_neural(
        &train,
        &train,
        &emb,
        &cfg,
        &CallbackConfig::disabled(),
        LossKind::Bce,
        ClassWeights::uniform(),
    )
    .unwrap();
    let preds = m.predict_all(train.texts(), &emb).unwrap();
    let correct = preds
        .iter()
        .zip(train.iter())
        .filter(|((l, _), i)| Some(*l) == i.label)
        .count();
    if correct != 32 {
        return Outcome::Fail(format!("train accuracy {correct}/32 after 200 epochs"));
    }

    let flipped = Dataset::new(
        "flipped",
        train
            .iter()
            .map(|i| {
                let l = if i.label == Some(Label::Off) {
                    Label::Not
                } else {
                    Label::Off
                };
                Instance::labeled(i.id.clone(), i.text.clone(), l)
            })
            .collect(),
    );
    let cb = CallbackConfig::default();
    let m = train_neural(
        &train,
        &flipped,
        &emb,
        &cfg,
        &cb,
        LossKind::Bce,
        ClassWeights::uniform(),
    )
    .unwrap();
    let h = &m.history;
    let best = h.best_epoch.unwrap_or(0);
    let last = h.epochs.last().map_or(0, |e| e.epoch);
    if !h.stopped_early || last - best > cb.early_stop_patience + 1 {
        return Outcome::Fail(format!(
            "stopped_early={} best={best} last={last}",
            h.stopped_early
        ));
    }
    Outcome::Pass(format!(
        "32/32 correct; plateau fixture best epoch {best}, stopped at {last} (patience {})",
        cb.early_stop_patience
    ))
}

// 11 to 13 ---------------------------------------------------------------------

struct OlidFiles {
    train: PathBuf,
    test: PathBuf,
    labels: PathBuf,
}

fn olid_files() -> Option<OlidFiles> {
    let dir = PathBuf::from(std::env::var_os("OFFLANG_OLID_DIR")?);
    let f = OlidFiles {
        train: dir.join("olid-training-v1.0.tsv"),
        test: dir.join("testset-levela.tsv"),
        labels: dir.join("labels-levela.csv"),
    };
    (f.train.exists() && f.test.exists() && f.labels.exists()).then_some(f)
}

fn olid_config(f: &OlidFiles, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train = Some(f.train.clone());
    cfg.data.test = Some(f.test.clone());
    cfg.data.test_labels = Some(f.labels.clone());
    cfg.experiment.output_dir = out.to_path_buf();
    cfg
}

fn run_preset(f: &OlidFiles, out: &Path, name: &str) -> Result<RunReport, String> {
    let mut cfg = apply_preset(&olid_config(f, out), name).map_err(|e| e.to_string())?;
    cfg.experiment.output_dir = out.join(name);
    run_experiment(&cfg).map_err(|e| e.to_string())
}

const NO_OLID: &str = "OLID files not available (set OFFLANG_OLID_DIR)";

fn c11_unigram_svm() -> Outcome {
    let Some(f) = olid_files() else {
        return Outcome::Skip(NO_OLID.into());
    };
    let dir = tempfile::tempdir().unwrap();
    outcome(run_preset(&f, dir.path(), "unigram").and_then(|r| {
        let f1 = 100.0 * r.eval.macro_f1;
        ensure(
            (f1 - 50.45).abs() <= 5.0,
            format!("macro-F1 {f1:.2}, target 50.45 ± 5"),
        )?;
        Ok(format!("macro-F1 {f1:.2}"))
    }))
}

fn c12_orderings() -> Outcome {
    let Some(f) = olid_files() else {
        return Outcome::Skip(NO_OLID.into());
    };
    let dir = tempfile::tempdir().unwrap();
    let mut f1 = BTreeMap::new();
    for name in ["unigram", "u+b", "u+b+t", "char2", "char3", "char2-4"] {
        match run_preset(&f, dir.path(), name) {
            Ok(r) => {
                f1.insert(name, 100.0 * r.eval.macro_f1);
            }
            Err(e) => return Outcome::Fail(format!("{name}: {e}")),
        }
    }
    let checks = [
        (f1["u+b"] > f1["unigram"], "U+B > U"),
        (f1["u+b+t"] > f1["u+b"], "U+B+T > U+B"),
        (f1["char3"] > f1["char2"], "C3 > C2"),
        (f1["char2-4"] >= f1["char3"] - 0.5, "C2+C3+C4 >= C3 - 0.5"),
    ];
    let summary = format!("{f1:.2?}");
    let failed: Vec<&str> = checks.iter().filter(|(ok, _)| !ok).map(|(_, n)| *n).collect();
    if failed.is_empty() {
        Outcome::Pass(summary)
    } else {
        Outcome::Fail(format!("{} violated; {summary}", failed.join(", ")))
    }
}

fn c13_bilstm_gap() -> Outcome {
    let Some(f) = olid_files() else {
        return Outcome::Skip(NO_OLID.into());
    };
    let Some(glove) = std::env::var_os("OFFLANG_GLOVE").map(PathBuf::from) else {
        return Outcome::Skip("embeddings not available (set OFFLANG_GLOVE)".into());
    };
    let dir = tempfile::tempdir().unwrap();
    let svm = match run_preset(&f, dir.path(), "unigram") {
        Ok(r) => 100.0 * r.eval.macro_f1,
        Err(e) => return Outcome::Fail(e),
    };
    let mut cfg = apply_preset(&olid_config(&f, dir.path()), "bilstm").unwrap();
    cfg.data.embeddings = Some(glove);
    cfg.experiment.output_dir = dir.path().join("bilstm");
    outcome(run_experiment(&cfg).map_err(|e| e.to_string()).and_then(|r| {
        let nn = 100.0 * r.eval.macro_f1;
        ensure(
            nn - svm >= 10.0,
            format!("BiLSTM {nn:.2} vs SVM unigram {svm:.2}"),
        )?;
        Ok(format!("BiLSTM {nn:.2} vs SVM unigram {svm:.2}"))
    }))
}

// 14 --------------------------------------------------------------------------

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/compare")
        .join(name)
}

/// Hand-computed per-class F1 deltas (pps minus base) on the fixture.
fn expected_deltas() -> Vec<(&'static str, &'static str, Option<f64>)> {
    vec![
        // negative: base NOT 1/2, OFF 1/2; pps NOT 4/5, OFF 2/3
        ("negative", "NOT", Some(0.8 - 0.5)),
        ("negative", "OFF", Some(2.0 / 3.0 - 0.5)),
        // neutral: base NOT 2/3, OFF 0; pps both 1
        ("neutral", "NOT", Some(1.0 - 2.0 / 3.0)),
        ("neutral", "OFF", Some(1.0)),
        ("positive", "NOT", None),
        ("positive", "OFF", None),
    ]
}

/// (model, gold, pred) -> count
fn expected_confusion() -> BTreeMap<(String, String, String), usize> {
    let rows = [
        ("base", "NOT", "NOT", 2),
        ("base", "NOT", "OFF", 1),
        ("base", "OFF", "NOT", 2),
        ("base", "OFF", "OFF", 1),
        ("pps", "NOT", "NOT", 3),
        ("pps", "NOT", "OFF", 0),
        ("pps", "OFF", "NOT", 1),
        ("pps", "OFF", "OFF", 2),
    ];
    rows.iter()
        .map(|&(m, g, p, c)| ((m.to_string(), g.to_string(), p.to_string()), c))
        .collect()
}

fn check_library() -> Result<(), String> {
    let gold = offlang::corpus::load_olid(fixture("gold.tsv"), true).map_err(|e| e.to_string())?;
    let file = load_sentiment_file(fixture("sentiment.tsv")).map_err(|e| e.to_string())?;
    let gold = attach_sentiments(&gold, SentimentInput::File(&file)).map_err(|e| e.to_string())?;
    let a = load_predictions(fixture("base.tsv")).map_err(|e| e.to_string())?;
    let b = load_predictions(fixture("pps.tsv")).map_err(|e| e.to_string())?;
    let c = compare_predictions(&gold, ("base", &a), ("pps", &b), EffectMetric::PerClass)
        .map_err(|e| e.to_string())?;
    for ((m, g, p), n) in expected_confusion() {
        let cm = if m == "base" {
            &c.confusion_a
        } else {
            &c.confusion_b
        };
        let got = cm.get(g.parse().unwrap(), p.parse().unwrap());
        ensure(
            got == n,
            format!("library confusion {m} ({g},{p}) = {got}, expected {n}"),
        )?;
    }
    let table = c.effect.as_ref().ok_or("no sentiment table")?;
    ensure(table.total() == 6, "partition sizes do not sum to 6")?;
    for (s, l, want) in expected_deltas() {
        let got = table.delta(s.parse().unwrap(), l);
        let ok = match (got, want) {
            (Some(g), Some(w)) => (g - w).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        ensure(
            ok,
            format!("library delta ({s},{l}) = {got:?}, expected {want:?}"),
        )?;
    }
    Ok(())
}

fn check_cli() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_offlang"))
        .args(["--log-level", "error", "compare", "--gold"])
        .arg(fixture("gold.tsv"))
        .arg("--sentiment")
        .arg(fixture("sentiment.tsv"))
        .arg(fixture("base.tsv"))
        .arg(fixture("pps.tsv"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("compare failed: {}", String::from_utf8_lossy(&out.stderr)),
    )?;

    let confusion = std::fs::read_to_string(dir.path().join("confusion.csv")).map_err(|e| e.to_string())?;
    let mut got = BTreeMap::new();
    for line in confusion.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        got.insert(
            (f[0].to_string(), f[1].to_string(), f[2].to_string()),
            f[3].parse::<usize>().unwrap(),
        );
    }
    ensure(
        got == expected_confusion(),
        format!("CLI confusion.csv mismatch: {got:?}"),
    )?;

    let effect =
        std::fs::read_to_string(dir.path().join("sentiment_effect.csv")).map_err(|e| e.to_string())?;
    let mut lines = effect.lines();
    ensure(
        lines.next() == Some("sentiment,label,delta,f1_a,f1_b,n"),
        "unexpected CSV header",
    )?;
    let cells: HashMap<(String, String), String> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), f[2].to_string())
        })
        .collect();
    for (s, l, want) in expected_deltas() {
        let cell = cells
            .get(&(s.to_string(), l.to_string()))
            .ok_or(format!("missing cell ({s},{l})"))?;
        let ok = match want {
            Some(w) => cell.parse::<f64>().is_ok_and(|g| (g - w).abs() <= 1e-12),
            None => cell == "NA",
        };
        ensure(ok, format!("CLI delta ({s},{l}) = {cell}, expected {want:?}"))?;
    }
    Ok(())
}

fn c14_compare_fixture() -> Outcome {
    outcome(
        check_library().and_then(|_| check_cli()).map(|_| {
            "paired confusion matrices and 6 delta cells match hand values (library and CLI)".into()
        }),
    )
}

fn main() {
    let criteria: [(u32, &str, Check); 14] = [
        (1, "focal(gamma=0) equals BCE", c1_focal_bce_identity),
        (2, "focal gradient vs finite differences", c2_focal_gradient),
        (3, "LSTM gradient check", c3_lstm_gradient),
        (4, "metrics vs brute-force oracle", c4_metrics_oracle),
        (5, "TF-IDF vs brute-force oracle", c5_tfidf_oracle),
        (6, "balanced class weights on OLID counts", c6_balanced_weights),
        (
            7,
            "normalization idempotence and postconditions",
            c7_normalization,
        ),
        (8, "PPS round trip", c8_pps_round_trip),
        (9, "training determinism", c9_determinism),
        (
            10,
            "neural capacity and early stopping",
            c10_capacity_and_early_stop,
        ),
        (11, "unigram SVM macro-F1 on OLID", c11_unigram_svm),
        (12, "n-gram ordering on OLID", c12_orderings),
        (13, "BiLSTM beats unigram SVM by 10 F1", c13_bilstm_gap),
        (14, "compare on the 6-instance fixture", c14_compare_fixture),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        match result {
            Outcome::Pass(d) => println!("criterion {n}: PASS  {name}: {d}"),
            Outcome::Skip(d) => println!("criterion {n}: SKIP  {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
