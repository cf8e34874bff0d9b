use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use offlang::corpus::{dataset_stats, load_olid, save_olid, Dataset};
use offlang::eval::{evaluate_predictions, load_predictions, EffectMetric, ReportMeta};
use offlang::features::FeatureBlockSpec;
use offlang::runner::{
    apply_preset, compare_predictions, load_test_set, run_experiment, sweep, sweep_summary_csv, DataConfig,
    ExperimentConfig, LossChoice, Method, RunReport, PRESET_NAMES,
};
use offlang::sentiment::{
    attach_sentiments, augment_dataset, load_sentiment_file, sentiment_distribution, write_sentiment_file,
    FileSource, LexiconSource, SentimentInput,
};

/// Offensive-language classification toolkit.
#[derive(Parser)]
#[command(name = "offlang", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label counts, token lengths, and the label x sentiment table.
    Stats(StatsArgs),
    /// Prepend a sentiment word to every tweet.
    Augment(AugmentArgs),
    /// Run one experiment and write its report, predictions and model.
    Train(TrainArgs),
    /// Score a predictions file against gold labels.
    Evaluate(EvaluateArgs),
    /// Compare two prediction sets: confusion matrices and per-sentiment F1 deltas.
    Compare(CompareArgs),
    /// Run a list of presets and collect a summary table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// OLID-format TSV.
    data: PathBuf,
    /// Gold labels for an unlabeled file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Sentiment TSV; adds the label x sentiment distribution.
    #[arg(long)]
    sentiment: Option<PathBuf>,
    /// Write the distribution as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SentimentSourceArgs {
    /// Sentiment TSV (id, sentiment).
    #[arg(long, conflicts_with = "lexicon")]
    sentiment: Option<PathBuf>,
    /// Lexicon TSV (term, positive|negative).
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    source: SentimentSourceArgs,
    /// Input has no label column.
    #[arg(long)]
    no_labels: bool,
    /// Also write the sentiments used as a sentiment TSV.
    #[arg(long)]
    emit_sentiments: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Svm,
    Lstm,
    Bilstm,
    External,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Svm => Method::Svm,
            MethodArg::Lstm => Method::Lstm,
            MethodArg::Bilstm => Method::Bilstm,
            MethodArg::External => Method::External,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Bce,
    Focal,
}

/// Flags that override config-file values.
#[derive(Args, Default)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    sentiment: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    /// Prepend sentiments before training.
    #[arg(long)]
    pps: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Feature blocks, e.g. `w1,w2,c3`.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<FeatureBlockSpec>>,
    /// SVM C values to search.
    #[arg(long, value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    /// Use uniform class weights instead of balanced ones.
    #[arg(long)]
    uniform_weights: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
}

impl Overrides {
    fn base_config(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        let d: &mut DataConfig = &mut cfg.data;
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                *slot = v.clone();
            }
        };
        set(&mut d.train, &self.train);
        set(&mut d.test, &self.test);
        set(&mut d.test_labels, &self.test_labels);
        set(&mut d.sentiment, &self.sentiment);
        set(&mut d.lexicon, &self.lexicon);
        set(&mut d.predictions, &self.predictions);
        set(&mut d.embeddings, &self.embeddings);
        if let Some(v) = self.embedding_dim {
            d.embedding_dim = v;
        }
        if let Some(v) = self.dev_fraction {
            d.dev_fraction = v;
        }
        let e = &mut cfg.experiment;
        if self.pps {
            e.pps = true;
        }
        if self.seed.is_some() {
            e.seed = self.seed;
        }
        if let Some(o) = &self.out {
            e.output_dir = o.clone();
        }
        if let Some(l) = self.loss {
            e.loss = match l {
                LossArg::Bce => LossChoice::Bce,
                LossArg::Focal => LossChoice::Focal,
            };
        }
        if let Some(b) = &self.blocks {
            e.blocks = b.clone();
        }
        if let Some(c) = &self.c_grid {
            e.c_grid = c.clone();
        }
        if self.uniform_weights {
            e.balanced_weights = false;
        }
        if let Some(v) = self.max_epochs {
            cfg.neural.max_epochs = v;
        }
        if let Some(v) = self.units {
            cfg.neural.units = v;
        }
        if let Some(v) = self.layers {
            cfg.neural.layers = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Named preset (unigram, u+b, char2-4, bilstm, ...).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Run name used in reports.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GoldArgs {
    /// Gold OLID TSV.
    #[arg(long)]
    gold: PathBuf,
    /// Separate gold labels (`id,label` CSV or TSV) for an unlabeled file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl GoldArgs {
    fn load(&self) -> Result<Dataset> {
        let data = DataConfig {
            test: Some(self.gold.clone()),
            test_labels: self.labels.clone(),
            ..Default::default()
        };
        load_test_set(&data).with_context(|| format!("loading gold data {}", self.gold.display()))
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    gold: GoldArgs,
    /// Predictions TSV (id, label).
    #[arg(long)]
    predictions: PathBuf,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value = "")]
    name: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    PerClass,
    Macro,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    gold: GoldArgs,
    /// Sentiment TSV for the gold ids; enables the per-sentiment table.
    #[arg(long)]
    sentiment: Option<PathBuf>,
    /// Baseline predictions TSV or run report JSON.
    a: PathBuf,
    /// Second predictions TSV or run report JSON.
    b: PathBuf,
    #[arg(long)]
    name_a: Option<String>,
    #[arg(long)]
    name_b: Option<String>,
    #[arg(long, value_enum, default_value = "per-class")]
    metric: MetricArg,
    /// Directory for confusion.csv, sentiment_effect.csv and comparison.json.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Presets to run; defaults to all.
    #[arg(long, value_delimiter = ',')]
    presets: Option<Vec<String>>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Stats(a) => stats(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn stats(a: StatsArgs) -> Result<()> {
    let d = GoldArgs {
        gold: a.data.clone(),
        labels: a.labels,
    }
    .load()?;
    println!("{}", dataset_stats(&d).context("stats")?);
    if let Some(path) = &a.sentiment {
        let file = load_sentiment_file(path)?;
        let d = attach_sentiments(&d, SentimentInput::File(&file))?;
        let dist = sentiment_distribution(&d)?;
        println!("{dist}");
        if let Some(csv) = &a.csv {
            std::fs::write(csv, dist.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        }
    } else if a.csv.is_some() {
        bail!("--csv needs --sentiment");
    }
    Ok(())
}

enum Source {
    File(FileSource),
    Lexicon(LexiconSource),
}

impl Source {
    fn load(a: &SentimentSourceArgs) -> Result<Self> {
        match (&a.sentiment, &a.lexicon) {
            (Some(p), _) => Ok(Source::File(load_sentiment_file(p)?)),
            (None, Some(p)) => Ok(Source::Lexicon(LexiconSource::load(p)?)),
            (None, None) => bail!("give --sentiment or --lexicon"),
        }
    }

    fn input(&self) -> SentimentInput<'_> {
        match self {
            Source::File(f) => SentimentInput::File(f),
            Source::Lexicon(l) => SentimentInput::Predictor(l),
        }
    }
}

fn augment(a: AugmentArgs) -> Result<()> {
    let d = load_olid(&a.input, !a.no_labels)?;
    let src = Source::load(&a.source)?;
    let out = augment_dataset(&d, src.input()).context("augment")?;
    save_olid(&out, &a.output)?;
    if let Some(p) = &a.emit_sentiments {
        let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_sentiment_file(&out, std::io::BufWriter::new(f))?;
    }
    eprintln!("wrote {} instances to {}", out.len(), a.output.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.overrides.base_config()?;
    if let Some(p) = &a.preset {
        cfg = apply_preset(&cfg, p)?;
    }
    if let Some(m) = a.method {
        cfg.experiment.method = m.into();
    }
    if let Some(n) = a.name {
        cfg.experiment.name = n;
    }
    a.overrides.apply(&mut cfg);
    let report = run_experiment(&cfg)?;
    println!("{report}");
    eprintln!("report written to {}", report.artifacts.report.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let gold = a.gold.load()?;
    let preds = load_predictions(&a.predictions)?;
    let report =
        evaluate_predictions(&gold, &preds, &a.predictions.display().to_string())?.with_meta(ReportMeta {
            method: a.name,
            ..Default::default()
        });
    println!("{report}");
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json()? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Predictions from a TSV, or from the predictions artifact of a run report.
fn load_side(path: &Path) -> Result<(String, offlang::eval::Predictions)> {
    if path.extension().is_some_and(|e| e == "json") {
        let r = RunReport::load(path)?;
        Ok((r.name.clone(), r.predictions()?))
    } else {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok((name, load_predictions(path)?))
    }
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut gold = a.gold.load()?;
    if let Some(p) = &a.sentiment {
        let file = load_sentiment_file(p)?;
        gold = attach_sentiments(&gold, SentimentInput::File(&file))?;
    }
    let (na, pa) = load_side(&a.a)?;
    let (nb, pb) = load_side(&a.b)?;
    let na = a.name_a.unwrap_or(na);
    let nb = a.name_b.unwrap_or(nb);
    let metric = match a.metric {
        MetricArg::PerClass => EffectMetric::PerClass,
        MetricArg::Macro => EffectMetric::Macro,
    };
    let cmp = compare_predictions(&gold, (&na, &pa), (&nb, &pb), metric)?;
    print!("{cmp}");
    if let Some(dir) = &a.out {
        for p in cmp.write_to(dir)? {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.overrides.base_config()?;
    a.overrides.apply(&mut cfg);
    let names: Vec<String> = a
        .presets
        .unwrap_or_else(|| PRESET_NAMES.iter().map(|s| s.to_string()).collect());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let outcomes = sweep(&cfg, &refs)?;
    print!("{}", sweep_summary_csv(&outcomes));
    let failed: Vec<_> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    for o in &failed {
        if let Err(e) = &o.result {
            eprintln!("{}: {e}", o.preset);
        }
    }
    if !failed.is_empty() {
        bail!("{} of {} presets failed", failed.len(), outcomes.len());
    }
    Ok(())
}
