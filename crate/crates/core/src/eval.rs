//! Confusion matrices, precision/recall/F1, prediction files, and the
//! model-vs-model analyses (paired confusion matrices, per-sentiment F1 deltas).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_tsv, Dataset, Label};
use crate::error::{Error, Result};
use crate::sentiment::Sentiment;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// 2×2 counts indexed `[gold][predicted]`, NOT = 0, OFF = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 2]; 2],
}

impl ConfusionMatrix {
    pub fn get(&self, gold: Label, pred: Label) -> usize {
        self.counts[gold.index()][pred.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn gold_count(&self, label: Label) -> usize {
        self.counts[label.index()].iter().sum()
    }

    pub fn predicted_count(&self, label: Label) -> usize {
        self.counts.iter().map(|row| row[label.index()]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self.counts[0][0] + self.counts[1][1];
        ratio(correct, self.total())
    }

    pub fn to_csv_rows(&self, model: &str) -> String {
        let mut out = String::new();
        for gold in Label::ALL {
            for pred in Label::ALL {
                out.push_str(&format!("{model},{gold},{pred},{}\n", self.get(gold, pred)));
            }
        }
        out
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8}", "gold\\pred", "NOT", "OFF")?;
        for gold in Label::ALL {
            writeln!(
                f,
                "{:<10} {:>8} {:>8}",
                gold.as_str(),
                self.get(gold, Label::Not),
                self.get(gold, Label::Off)
            )?;
        }
        Ok(())
    }
}

pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: gold.len(),
            right: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::default();
    for (g, p) in gold.iter().zip(pred) {
        cm.counts[g.index()][p.index()] += 1;
    }
    Ok(cm)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl ClassMetrics {
    /// 0/0 precision or recall resolves to 0, as does F1 when P + R = 0.
    pub fn from_confusion(cm: &ConfusionMatrix, label: Label) -> Self {
        let tp = cm.get(label, label);
        let precision = ratio(tp, cm.predicted_count(label));
        let recall = ratio(tp, cm.gold_count(label));
        ClassMetrics {
            precision,
            recall,
            f1: f1(precision, recall),
            support: cm.gold_count(label),
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub meta: ReportMeta,
    pub confusion: ConfusionMatrix,
    pub per_class: BTreeMap<Label, ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.per_class[&label]
    }

    pub fn with_meta(mut self, meta: ReportMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.meta.method.is_empty() {
            writeln!(f, "method: {} (seed {})", self.meta.method, self.meta.seed)?;
        }
        writeln!(
            f,
            "{:<8} {:>9} {:>9} {:>9} {:>8}",
            "class", "precision", "recall", "f1", "support"
        )?;
        for label in Label::ALL {
            let m = self.class(label);
            writeln!(
                f,
                "{:<8} {:>9.2} {:>9.2} {:>9.2} {:>8}",
                label.as_str(),
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                m.support
            )?;
        }
        writeln!(
            f,
            "{:<8} {:>9.2} {:>9.2} {:>9.2} {:>8}",
            "macro",
            100.0 * self.macro_precision,
            100.0 * self.macro_recall,
            100.0 * self.macro_f1,
            self.confusion.total()
        )?;
        writeln!(f, "accuracy {:.2}", 100.0 * self.accuracy)?;
        write!(f, "{}", self.confusion)
    }
}

/// Per-class and macro-averaged metrics of a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> EvalReport {
    let per_class: BTreeMap<Label, ClassMetrics> = Label::ALL
        .iter()
        .map(|&l| (l, ClassMetrics::from_confusion(cm, l)))
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / 2.0;
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        meta: ReportMeta::default(),
        confusion: *cm,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: cm.accuracy(),
        per_class,
    }
}

pub fn evaluate(gold: &[Label], pred: &[Label]) -> Result<EvalReport> {
    Ok(metrics(&confusion(gold, pred)?))
}

pub fn macro_f1(gold: &[Label], pred: &[Label]) -> Result<f64> {
    Ok(evaluate(gold, pred)?.macro_f1)
}

pub type Predictions = BTreeMap<String, Label>;

/// Loads `id<TAB>label` predictions. Labels are case-insensitive; a header
/// whose first cell is `id` is skipped. Lines without a tab are split on the
/// first comma, which also reads OLID's `labels-levela.csv`.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let mut rows = read_tsv(path)?.into_iter().peekable();
    if let Some((_, first)) = rows.peek() {
        let head = first[0].split(',').next().unwrap_or_default();
        if head == "id" {
            rows.next();
        }
    }
    let mut out = BTreeMap::new();
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (line, cells) in rows {
        let cells: Vec<String> = if cells.len() == 1 {
            cells[0].splitn(2, ',').map(str::to_string).collect()
        } else {
            cells
        };
        if cells.len() != 2 {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected 2 columns (id, label), found {}", cells.len()),
            });
        }
        let label = Label::parse_loose(cells[1].trim()).ok_or_else(|| Error::UnknownLabel {
            path: path.to_path_buf(),
            line,
            value: cells[1].clone(),
        })?;
        if let Some(first_line) = lines.insert(cells[0].clone(), line) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: cells[0].clone(),
                first_line,
                line,
            });
        }
        out.insert(cells[0].clone(), label);
    }
    Ok(out)
}

/// Writes `id<TAB>label` rows in the given order, with a header.
pub fn write_predictions<'a, W, I>(rows: I, mut out: W) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, Label)>,
{
    writeln!(out, "id\tlabel")?;
    for (id, label) in rows {
        writeln!(out, "{id}\t{label}")?;
    }
    Ok(())
}

/// Predicted labels aligned with `gold`'s instance order.
pub fn aligned_predictions(gold: &Dataset, preds: &Predictions, source_name: &str) -> Result<Vec<Label>> {
    gold.iter()
        .map(|inst| {
            preds.get(&inst.id).copied().ok_or_else(|| Error::MissingId {
                id: inst.id.clone(),
                source_name: source_name.to_string(),
            })
        })
        .collect()
}

pub fn evaluate_predictions(gold: &Dataset, preds: &Predictions, source_name: &str) -> Result<EvalReport> {
    let pred = aligned_predictions(gold, preds, source_name)?;
    evaluate(&gold.labels()?, &pred)
}

/// Which F1 the per-sentiment table reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectMetric {
    /// Per-class F1 inside each sentiment partition (one cell per label).
    #[default]
    PerClass,
    /// Macro-F1 of each sentiment partition (one cell per sentiment).
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCell {
    /// `NOT`, `OFF`, or `macro`.
    pub column: String,
    pub f1_a: Option<f64>,
    pub f1_b: Option<f64>,
    /// `f1_b - f1_a`; `None` when the partition is empty.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub sentiment: Sentiment,
    pub n: usize,
    pub gold_counts: BTreeMap<Label, usize>,
    pub cells: Vec<EffectCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentEffectTable {
    pub metric: EffectMetric,
    pub rows: Vec<EffectRow>,
}

impl SentimentEffectTable {
    pub fn row(&self, s: Sentiment) -> &EffectRow {
        &self.rows[s.index()]
    }

    pub fn delta(&self, s: Sentiment, column: &str) -> Option<f64> {
        self.row(s)
            .cells
            .iter()
            .find(|c| c.column == column)
            .and_then(|c| c.delta)
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.n).sum()
    }

    /// Long-format CSV for plotting: `sentiment,label,delta,f1_a,f1_b,n`,
    /// undefined cells written as `NA`.
    pub fn to_csv(&self) -> String {
        let na = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        let mut out = String::from("sentiment,label,delta,f1_a,f1_b,n\n");
        for row in &self.rows {
            for cell in &row.cells {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.sentiment,
                    cell.column,
                    na(cell.delta),
                    na(cell.f1_a),
                    na(cell.f1_b),
                    row.n
                ));
            }
        }
        out
    }
}

impl fmt::Display for SentimentEffectTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let columns: Vec<&str> = self.rows[0].cells.iter().map(|c| c.column.as_str()).collect();
        write!(f, "{:<10} {:>6}", "sentiment", "n")?;
        for c in &columns {
            write!(f, " {:>9}", format!("Δ{c}"))?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<10} {:>6}", row.sentiment.as_str(), row.n)?;
            for cell in &row.cells {
                match cell.delta {
                    Some(d) => write!(f, " {:>+9.2}", 100.0 * d)?,
                    None => write!(f, " {:>9}", "n/a")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// F1 differences (b − a) inside each sentiment partition of `gold`.
pub fn sentiment_effect(
    gold: &Dataset,
    preds_a: &Predictions,
    preds_b: &Predictions,
    metric: EffectMetric,
) -> Result<SentimentEffectTable> {
    let labels = gold.labels()?;
    let a = aligned_predictions(gold, preds_a, "predictions A")?;
    let b = aligned_predictions(gold, preds_b, "predictions B")?;
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, inst) in gold.iter().enumerate() {
        let s = inst
            .sentiment
            .ok_or_else(|| Error::MissingSentiment { id: inst.id.clone() })?;
        parts[s.index()].push(i);
    }

    let rows = Sentiment::ALL
        .iter()
        .map(|&s| {
            let idx = &parts[s.index()];
            let pick = |v: &[Label]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let g = pick(&labels);
            let mut gold_counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
            for l in &g {
                *gold_counts.get_mut(l).expect("all labels present") += 1;
            }
            let reports = if idx.is_empty() {
                None
            } else {
                Some((evaluate(&g, &pick(&a))?, evaluate(&g, &pick(&b))?))
            };
            let cell = |column: &str, get: &dyn Fn(&EvalReport) -> f64| {
                let (fa, fb) = match &reports {
                    Some((ra, rb)) => (Some(get(ra)), Some(get(rb))),
                    None => (None, None),
                };
                EffectCell {
                    column: column.to_string(),
                    f1_a: fa,
                    f1_b: fb,
                    delta: fa.zip(fb).map(|(x, y)| y - x),
                }
            };
            let cells = match metric {
                EffectMetric::PerClass => Label::ALL
                    .iter()
                    .map(|&l| cell(l.as_str(), &|r: &EvalReport| r.class(l).f1))
                    .collect(),
                EffectMetric::Macro => vec![cell("macro", &|r: &EvalReport| r.macro_f1)],
            };
            Ok(EffectRow {
                sentiment: s,
                n: idx.len(),
                gold_counts,
                cells,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SentimentEffectTable { metric, rows })
}
