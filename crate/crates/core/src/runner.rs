//! Experiment orchestration: config files, the train/evaluate pipeline,
//! run comparison, and preset sweeps.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_olid, make_dev_split, Dataset, Label};
use crate::error::{Error, Result, StageExt};
use crate::eval::{
    aligned_predictions, confusion, evaluate, load_predictions, metrics, sentiment_effect, write_predictions,
    ConfusionMatrix, EffectMetric, EvalReport, Predictions, ReportMeta, SentimentEffectTable,
};
use crate::features::{tokenize_words, FeatureBlockSpec, Vocabulary};
use crate::linear::{grid_search_c, train_svm, LinearConfig, DEFAULT_C_GRID};
use crate::losses::{ClassWeights, FocalParams};
use crate::neural::{
    load_embeddings_filtered, train_neural, CallbackConfig, LossKind, NeuralConfig, TrainingHistory,
};
use crate::sentiment::{augment_dataset, load_sentiment_file, LexiconSource, SentimentInput};
use crate::textnorm::{normalize_dataset, NormConfig};

pub const RUN_REPORT_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_NEURAL_SEED: u64 = 1234;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Svm,
    Lstm,
    Bilstm,
    External,
}

impl Method {
    pub fn is_neural(self) -> bool {
        matches!(self, Method::Lstm | Method::Bilstm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Svm => "svm",
            Method::Lstm => "lstm",
            Method::Bilstm => "bilstm",
            Method::External => "external",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "svm" => Ok(Method::Svm),
            "lstm" => Ok(Method::Lstm),
            "bilstm" => Ok(Method::Bilstm),
            "external" => Ok(Method::External),
            _ => Err(format!(
                "unknown method {s:?} (expected svm, lstm, bilstm or external)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    #[default]
    Bce,
    Focal,
}

/// Input files. Relative paths in a config file resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Separate gold labels for an unlabeled test file (`id,label` or TSV).
    pub test_labels: Option<PathBuf>,
    /// Sentiment TSV covering train and test ids.
    pub sentiment: Option<PathBuf>,
    /// Term lexicon used for PPS when no sentiment file is given.
    pub lexicon: Option<PathBuf>,
    /// Predictions for the `external` method.
    pub predictions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub dev_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            test_labels: None,
            sentiment: None,
            lexicon: None,
            predictions: None,
            embeddings: None,
            embedding_dim: 200,
            dev_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub method: Method,
    pub blocks: Vec<FeatureBlockSpec>,
    pub pps: bool,
    /// Overrides the per-method seeds when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub c_grid: Vec<f64>,
    /// Balanced class weights from the training labels.
    pub balanced_weights: bool,
    pub loss: LossChoice,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "run".into(),
            method: Method::Svm,
            blocks: vec![FeatureBlockSpec::word(1)],
            pps: false,
            seed: None,
            output_dir: PathBuf::from("runs/run"),
            c_grid: DEFAULT_C_GRID.to_vec(),
            balanced_weights: true,
            loss: LossChoice::Bce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub experiment: ExperimentSection,
    pub norm: NormConfig,
    pub linear: LinearConfig,
    pub neural: NeuralConfig,
    pub callbacks: CallbackConfig,
    pub focal: FocalParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            experiment: ExperimentSection::default(),
            norm: NormConfig::default(),
            linear: LinearConfig {
                seed: DEFAULT_SEED,
                ..Default::default()
            },
            neural: NeuralConfig {
                seed: DEFAULT_NEURAL_SEED,
                ..Default::default()
            },
            callbacks: CallbackConfig::default(),
            focal: FocalParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a TOML config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.train,
            &mut d.test,
            &mut d.test_labels,
            &mut d.sentiment,
            &mut d.lexicon,
            &mut d.predictions,
            &mut d.embeddings,
        ] {
            fix(p);
        }
        if self.experiment.output_dir.is_relative() {
            self.experiment.output_dir = base.join(&self.experiment.output_dir);
        }
    }

    /// Seed used by the selected method's trainer and the dev split.
    pub fn seed(&self) -> u64 {
        self.experiment
            .seed
            .unwrap_or(if self.experiment.method.is_neural() {
                self.neural.seed
            } else {
                self.linear.seed
            })
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.experiment.loss {
            LossChoice::Bce => LossKind::Bce,
            LossChoice::Focal => LossKind::Focal(self.focal),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let d = &self.data;
        let missing = |what: &str| Err(Error::InvalidConfig(format!("method {} needs {what}", e.method)));
        if d.test.is_none() {
            return missing("data.test");
        }
        match e.method {
            Method::External => {
                if d.predictions.is_none() {
                    return missing("data.predictions");
                }
                return Ok(());
            }
            Method::Svm => {
                if e.blocks.is_empty() {
                    return missing("at least one feature block");
                }
                if e.c_grid.is_empty() || e.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                    return Err(Error::InvalidConfig("c_grid must hold positive values".into()));
                }
                self.linear.validate()?;
            }
            Method::Lstm | Method::Bilstm => {
                if d.embeddings.is_none() {
                    return missing("data.embeddings");
                }
                self.neural.validate()?;
                self.callbacks.validate()?;
                self.focal.validate()?;
            }
        }
        if d.train.is_none() {
            return missing("data.train");
        }
        if !(d.dev_fraction > 0.0 && d.dev_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dev_fraction must be in (0, 1), got {}",
                d.dev_fraction
            )));
        }
        if e.pps && d.sentiment.is_none() && d.lexicon.is_none() {
            return Err(Error::InvalidConfig(
                "pps needs data.sentiment or data.lexicon".into(),
            ));
        }
        self.norm.validate()
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

/// A named shortcut for a method and its feature blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub method: Method,
    pub blocks: Vec<FeatureBlockSpec>,
    pub units: Option<usize>,
    pub dropout: Option<f64>,
}

pub const PRESET_NAMES: [&str; 16] = [
    "unigram",
    "bigram",
    "trigram",
    "u+b",
    "u+b+t",
    "char2",
    "char3",
    "char4",
    "char2-4",
    "char1-4",
    "lstm",
    "lstm-u50",
    "lstm-d0.3",
    "bilstm",
    "bilstm-u50",
    "bilstm-d0.3",
];

pub fn preset(name: &str) -> Option<Preset> {
    let name = PRESET_NAMES.iter().copied().find(|n| *n == name)?;
    let w = FeatureBlockSpec::word;
    let c = FeatureBlockSpec::char;
    let svm = |blocks: Vec<FeatureBlockSpec>| Preset {
        name,
        method: Method::Svm,
        blocks,
        units: None,
        dropout: None,
    };
    let nn = |method, units, dropout| Preset {
        name,
        method,
        blocks: Vec::new(),
        units,
        dropout,
    };
    Some(match name {
        "unigram" => svm(vec![w(1)]),
        "bigram" => svm(vec![w(2)]),
        "trigram" => svm(vec![w(3)]),
        "u+b" => svm(vec![w(1), w(2)]),
        "u+b+t" => svm(vec![w(1), w(2), w(3)]),
        "char2" => svm(vec![c(2)]),
        "char3" => svm(vec![c(3)]),
        "char4" => svm(vec![c(4)]),
        "char2-4" => svm(vec![c(2), c(3), c(4)]),
        "char1-4" => svm(vec![c(1), c(2), c(3), c(4)]),
        "lstm" => nn(Method::Lstm, None, None),
        "lstm-u50" => nn(Method::Lstm, Some(50), None),
        "lstm-d0.3" => nn(Method::Lstm, None, Some(0.3)),
        "bilstm" => nn(Method::Bilstm, None, None),
        "bilstm-u50" => nn(Method::Bilstm, Some(50), None),
        "bilstm-d0.3" => nn(Method::Bilstm, None, Some(0.3)),
        _ => unreachable!(),
    })
}

/// `base` with the preset's method and settings; the run is named after the
/// preset.
pub fn apply_preset(base: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let p = preset(name).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "unknown preset {name:?} (known: {})",
            PRESET_NAMES.join(", ")
        ))
    })?;
    let mut cfg = base.clone();
    cfg.experiment.method = p.method;
    cfg.experiment.name = p.name.to_string();
    if !p.blocks.is_empty() {
        cfg.experiment.blocks = p.blocks;
    }
    cfg.neural.bidirectional = p.method == Method::Bilstm;
    if let Some(u) = p.units {
        cfg.neural.units = u;
    }
    if let Some(d) = p.dropout {
        cfg.neural.dropout_rate = d;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Artifacts {
    pub report: PathBuf,
    pub predictions: PathBuf,
    pub model: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub name: String,
    pub method: Method,
    pub seed: u64,
    /// Config as run; feeding it back to [`run_experiment`] repeats the run.
    pub config: ExperimentConfig,
    pub eval: EvalReport,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// `(C, dev macro-F1)` per grid point for SVM runs.
    pub grid: Vec<(f64, f64)>,
    pub best_c: Option<f64>,
    pub class_weights: Option<ClassWeights>,
    pub history: Option<TrainingHistory>,
    pub warnings: Vec<String>,
    pub timings: Vec<Timing>,
    pub artifacts: Artifacts,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RunReport = serde_json::from_str(&text)?;
        if r.version != RUN_REPORT_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported run report version {}", r.version),
            ));
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn predictions(&self) -> Result<Predictions> {
        load_predictions(&self.artifacts.predictions)
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "run {} ({}, seed {}): train {} / dev {} / test {}",
            self.name, self.method, self.seed, self.n_train, self.n_dev, self.n_test
        )?;
        if let Some(c) = self.best_c {
            writeln!(f, "best C: {c}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(f, "{}", self.eval)
    }
}

struct Stopwatch {
    timings: Vec<Timing>,
    at: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch {
            timings: Vec::new(),
            at: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: (now - self.at).as_secs_f64(),
        });
        self.at = now;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing {what}")))
}

/// Loads the test set, attaching separate gold labels when configured.
pub fn load_test_set(data: &DataConfig) -> Result<Dataset> {
    let path = required(&data.test, "data.test")?;
    match &data.test_labels {
        Some(labels) => {
            let d = load_olid(path, false)?;
            let gold = load_predictions(labels)?;
            d.with_labels(&gold, &labels.display().to_string())
        }
        None => load_olid(path, true),
    }
}

fn apply_pps(cfg: &ExperimentConfig, sets: Vec<Dataset>) -> Result<Vec<Dataset>> {
    if let Some(path) = &cfg.data.sentiment {
        let file = load_sentiment_file(path)?;
        sets.iter()
            .map(|d| augment_dataset(d, SentimentInput::File(&file)))
            .collect()
    } else {
        let path = required(&cfg.data.lexicon, "data.sentiment or data.lexicon")?;
        let lex = LexiconSource::load(path)?;
        sets.iter()
            .map(|d| augment_dataset(d, SentimentInput::Predictor(&lex)))
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_prediction_file(path: &Path, test: &Dataset, pred: &[Label]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_predictions(
        test.iter().map(|i| i.id.as_str()).zip(pred.iter().copied()),
        &mut w,
    )
    .map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Runs one experiment end to end and writes its artifacts to
/// `experiment.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate().stage("config")?;
    let mut cfg = cfg.clone();
    let seed = cfg.seed();
    if cfg.experiment.method.is_neural() {
        cfg.neural.seed = seed;
        cfg.neural.bidirectional = cfg.experiment.method == Method::Bilstm;
    } else {
        cfg.linear.seed = seed;
    }
    let out_dir = cfg.experiment.output_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(io_err(&out_dir))
        .stage("write")?;
    let mut artifacts = Artifacts {
        report: out_dir.join("report.json"),
        predictions: out_dir.join("predictions.tsv"),
        ..Default::default()
    };
    let mut clock = Stopwatch::new();
    let mut warnings = Vec::new();
    let mut report_extra = (Vec::new(), None, None, None);
    let (n_train, n_dev);

    let test = load_test_set(&cfg.data).stage("load")?;
    let gold = test.labels().stage("load")?;

    let pred: Vec<Label> = if cfg.experiment.method == Method::External {
        let path = required(&cfg.data.predictions, "data.predictions").stage("load")?;
        let preds = load_predictions(path).stage("load")?;
        clock.lap("load");
        n_train = 0;
        n_dev = 0;
        aligned_predictions(&test, &preds, &path.display().to_string()).stage("evaluate")?
    } else {
        let train = load_olid(required(&cfg.data.train, "data.train").stage("load")?, true).stage("load")?;
        clock.lap("load");
        let (train, test) = if cfg.experiment.pps {
            let mut v = apply_pps(&cfg, vec![train, test.clone()]).stage("augment")?;
            let test = v.pop().expect("two datasets");
            (v.pop().expect("two datasets"), test)
        } else {
            (train, test.clone())
        };
        let train = normalize_dataset(&train, &cfg.norm);
        let test = normalize_dataset(&test, &cfg.norm);
        clock.lap("normalize");
        let (train_part, dev) = make_dev_split(&train, cfg.data.dev_fraction, seed).stage("split")?;
        n_train = train_part.len();
        n_dev = dev.len();
        clock.lap("split");

        if cfg.experiment.method == Method::Svm {
            svm_pipeline(
                &cfg,
                &train,
                &train_part,
                &dev,
                &test,
                &out_dir,
                &mut artifacts,
                &mut warnings,
                &mut report_extra,
                &mut clock,
            )?
        } else {
            neural_pipeline(
                &cfg,
                &train_part,
                &dev,
                &test,
                &out_dir,
                &mut artifacts,
                &mut report_extra,
                &mut clock,
            )?
        }
    };

    write_prediction_file(&artifacts.predictions, &test, &pred).stage("write")?;
    let meta = ReportMeta {
        method: cfg.experiment.name.clone(),
        config_hash: cfg.hash().stage("evaluate")?,
        seed,
    };
    let eval = evaluate(&gold, &pred).stage("evaluate")?.with_meta(meta);
    clock.lap("evaluate");
    let (grid, best_c, class_weights, history) = report_extra;
    let report = RunReport {
        version: RUN_REPORT_VERSION,
        name: cfg.experiment.name.clone(),
        method: cfg.experiment.method,
        seed,
        eval,
        n_train,
        n_dev,
        n_test: test.len(),
        grid,
        best_c,
        class_weights,
        history,
        warnings,
        timings: clock.timings,
        artifacts,
        config: cfg,
    };
    report.save(&report.artifacts.report).stage("write")?;
    Ok(report)
}

type Extra = (
    Vec<(f64, f64)>,
    Option<f64>,
    Option<ClassWeights>,
    Option<TrainingHistory>,
);

#[allow(clippy::too_many_arguments)]
fn svm_pipeline(
    cfg: &ExperimentConfig,
    train: &Dataset,
    train_part: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    out_dir: &Path,
    artifacts: &mut Artifacts,
    warnings: &mut Vec<String>,
    extra: &mut Extra,
    clock: &mut Stopwatch,
) -> Result<Vec<Label>> {
    let blocks = &cfg.experiment.blocks;
    let weights_for = |labels: &[Label]| -> Result<ClassWeights> {
        if cfg.experiment.balanced_weights {
            ClassWeights::balanced_for(labels)
        } else {
            Ok(cfg.linear.class_weights)
        }
    };

    let vocab = Vocabulary::build(train_part.texts(), blocks).stage("features")?;
    let xs = vocab.vectorize_all(train_part.texts());
    let dev_xs = vocab.vectorize_all(dev.texts());
    let ys = train_part.labels().stage("features")?;
    let dev_ys = dev.labels().stage("features")?;
    clock.lap("features");
    let base = LinearConfig {
        class_weights: weights_for(&ys).stage("train")?,
        ..cfg.linear.clone()
    };
    let grid = grid_search_c(
        (&xs, &ys),
        (&dev_xs, &dev_ys),
        vocab.dim(),
        &cfg.experiment.c_grid,
        &base,
    )
    .stage("train")?;
    clock.lap("grid search");

    let vocab = Vocabulary::build(train.texts(), blocks).stage("features")?;
    let xs = vocab.vectorize_all(train.texts());
    let ys = train.labels().stage("features")?;
    let weights = weights_for(&ys).stage("train")?;
    let final_cfg = LinearConfig {
        c: grid.best_c,
        class_weights: weights,
        ..cfg.linear.clone()
    };
    let model = train_svm(&xs, &ys, vocab.dim(), &final_cfg)
        .stage("train")?
        .with_vocab_fingerprint(vocab.fingerprint());
    if let Some(w) = &model.convergence_warning {
        warnings.push(w.clone());
    }
    clock.lap("train");
    let pred = model
        .predict_all(&vocab.vectorize_all(test.texts()))
        .stage("predict")?;
    clock.lap("predict");

    let model_path = out_dir.join("model.txt");
    let vocab_path = out_dir.join("vocab.txt");
    model.save(&model_path).stage("write")?;
    vocab.save(&vocab_path).stage("write")?;
    artifacts.model = Some(model_path);
    artifacts.vocabulary = Some(vocab_path);
    *extra = (grid.table, Some(grid.best_c), Some(weights), None);
    Ok(pred)
}

/// Tokens the embedding loader should keep: every token and its
/// punctuation-trimmed form.
fn needed_tokens<'a>(sets: impl IntoIterator<Item = &'a Dataset>) -> HashSet<String> {
    let mut keep = HashSet::new();
    for d in sets {
        for t in d.texts().flat_map(tokenize_words) {
            keep.insert(t.to_string());
            keep.insert(t.trim_matches(|c: char| c.is_ascii_punctuation()).to_string());
        }
    }
    keep
}

#[allow(clippy::too_many_arguments)]
fn neural_pipeline(
    cfg: &ExperimentConfig,
    train_part: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    out_dir: &Path,
    artifacts: &mut Artifacts,
    extra: &mut Extra,
    clock: &mut Stopwatch,
) -> Result<Vec<Label>> {
    let path = required(&cfg.data.embeddings, "data.embeddings").stage("embed")?;
    let keep = needed_tokens([train_part, dev, test]);
    let emb = load_embeddings_filtered(path, cfg.data.embedding_dim, Some(&keep)).stage("embed")?;
    log::info!("{} embeddings kept from {}", emb.len(), path.display());
    clock.lap("embed");
    let ys = train_part.labels().stage("train")?;
    let weights = if cfg.experiment.balanced_weights {
        ClassWeights::balanced_for(&ys).stage("train")?
    } else {
        ClassWeights::uniform()
    };
    let model = train_neural(
        train_part,
        dev,
        &emb,
        &cfg.neural,
        &cfg.callbacks,
        cfg.loss_kind(),
        weights,
    )
    .stage("train")?;
    clock.lap("train");
    let pred: Vec<Label> = model
        .predict_all(test.texts(), &emb)
        .stage("predict")?
        .into_iter()
        .map(|(l, _)| l)
        .collect();
    clock.lap("predict");
    let model_path = out_dir.join("model.json");
    model.save(&model_path).stage("write")?;
    artifacts.model = Some(model_path);
    *extra = (Vec::new(), None, Some(weights), Some(model.history.clone()));
    Ok(pred)
}

/// Two prediction sets over the same gold data, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name_a: String,
    pub name_b: String,
    pub confusion_a: ConfusionMatrix,
    pub confusion_b: ConfusionMatrix,
    pub report_a: EvalReport,
    pub report_b: EvalReport,
    /// Present when every gold instance has a sentiment.
    pub effect: Option<SentimentEffectTable>,
}

impl Comparison {
    /// Long-format confusion CSV: `model,gold,pred,count`.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("model,gold,pred,count\n");
        out.push_str(&self.confusion_a.to_csv_rows(&self.name_a));
        out.push_str(&self.confusion_b.to_csv_rows(&self.name_b));
        out
    }

    /// Writes `confusion.csv`, `comparison.json`, and `sentiment_effect.csv`
    /// when the effect table exists. Returns the written paths.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = vec![
            (dir.join("confusion.csv"), self.confusion_csv()),
            (
                dir.join("comparison.json"),
                serde_json::to_string_pretty(self)? + "\n",
            ),
        ];
        if let Some(t) = &self.effect {
            files.push((dir.join("sentiment_effect.csv"), t.to_csv()));
        }
        for (p, text) in &files {
            std::fs::write(p, text).map_err(io_err(p))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, cm, r) in [
            (&self.name_a, &self.confusion_a, &self.report_a),
            (&self.name_b, &self.confusion_b, &self.report_b),
        ] {
            writeln!(f, "{name}: macro-F1 {:.2}", 100.0 * r.macro_f1)?;
            write!(f, "{cm}")?;
            writeln!(f)?;
        }
        if let Some(t) = &self.effect {
            writeln!(
                f,
                "F1 change by sentiment ({} minus {}):",
                self.name_b, self.name_a
            )?;
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Compares two prediction sets over `gold`. Both sets must cover the same
/// ids.
pub fn compare_predictions(
    gold: &Dataset,
    a: (&str, &Predictions),
    b: (&str, &Predictions),
    metric: EffectMetric,
) -> Result<Comparison> {
    let ids_a: BTreeSet<&String> = a.1.keys().collect();
    let ids_b: BTreeSet<&String> = b.1.keys().collect();
    if ids_a != ids_b {
        let only_a = ids_a.difference(&ids_b).count();
        let only_b = ids_b.difference(&ids_a).count();
        return Err(Error::MismatchedRuns(format!(
            "{} ids only in {}, {} ids only in {}",
            only_a, a.0, only_b, b.0
        )));
    }
    let labels = gold.labels()?;
    let pa = aligned_predictions(gold, a.1, a.0)?;
    let pb = aligned_predictions(gold, b.1, b.0)?;
    let confusion_a = confusion(&labels, &pa)?;
    let confusion_b = confusion(&labels, &pb)?;
    let effect = if gold.iter().all(|i| i.sentiment.is_some()) {
        Some(sentiment_effect(gold, a.1, b.1, metric)?)
    } else {
        None
    };
    Ok(Comparison {
        name_a: a.0.to_string(),
        name_b: b.0.to_string(),
        report_a: metrics(&confusion_a),
        report_b: metrics(&confusion_b),
        confusion_a,
        confusion_b,
        effect,
    })
}

/// Compares two finished runs using their prediction files.
pub fn compare_runs(
    a: &RunReport,
    b: &RunReport,
    gold: &Dataset,
    metric: EffectMetric,
) -> Result<Comparison> {
    if a.n_test != b.n_test {
        return Err(Error::MismatchedRuns(format!(
            "{} has {} test instances, {} has {}",
            a.name, a.n_test, b.name, b.n_test
        )));
    }
    let pa = a.predictions()?;
    let pb = b.predictions()?;
    compare_predictions(gold, (&a.name, &pa), (&b.name, &pb), metric)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub preset: String,
    pub result: Result<RunReport>,
}

/// Runs each preset on top of `base`, writing every run into
/// `base.experiment.output_dir/<preset>` and a `summary.csv` of the
/// successful ones.
pub fn sweep(base: &ExperimentConfig, presets: &[&str]) -> Result<Vec<SweepOutcome>> {
    let root = base.experiment.output_dir.clone();
    let mut outcomes = Vec::with_capacity(presets.len());
    for &name in presets {
        let result = apply_preset(base, name).and_then(|mut cfg| {
            cfg.experiment.output_dir = root.join(name.replace('/', "_"));
            run_experiment(&cfg)
        });
        match &result {
            Ok(r) => log::info!("{name}: macro-F1 {:.2}", 100.0 * r.eval.macro_f1),
            Err(e) => log::error!("{name}: {e}"),
        }
        outcomes.push(SweepOutcome {
            preset: name.to_string(),
            result,
        });
    }
    std::fs::create_dir_all(&root).map_err(io_err(&root))?;
    let path = root.join("summary.csv");
    std::fs::write(&path, sweep_summary_csv(&outcomes)).map_err(io_err(&path))?;
    Ok(outcomes)
}

pub fn sweep_summary_csv(outcomes: &[SweepOutcome]) -> String {
    let mut out = String::from("preset,method,macro_precision,macro_recall,macro_f1,accuracy,best_c\n");
    for o in outcomes {
        if let Ok(r) = &o.result {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                o.preset,
                r.method,
                100.0 * r.eval.macro_precision,
                100.0 * r.eval.macro_recall,
                100.0 * r.eval.macro_f1,
                100.0 * r.eval.accuracy,
                r.best_c.map(|c| c.to_string()).unwrap_or_default()
            ));
        }
    }
    out
}
