//! Sentiment labels, sentiment sources, and sentiment-prepend augmentation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_tsv, Dataset, Instance, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Negative, Sentiment::Neutral, Sentiment::Positive];

    /// Canonical surface form, also the word that gets prepended.
    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
            Sentiment::Positive => "positive",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Sentiment::Negative => 0,
            Sentiment::Neutral => 1,
            Sentiment::Positive => 2,
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            "positive" => Ok(Sentiment::Positive),
            other => Err(other.to_string()),
        }
    }
}

/// A deterministic text → sentiment predictor.
pub trait SentimentSource {
    fn name(&self) -> &str;
    fn predict(&self, text: &str) -> Sentiment;
}

/// Word-list predictor: whichever list has more token hits wins; ties are neutral.
#[derive(Debug, Clone, Default)]
pub struct LexiconSource {
    positive: HashSet<String>,
    negative: HashSet<String>,
}

impl LexiconSource {
    pub fn new<P, N, S, T>(positive: P, negative: N) -> Result<Self>
    where
        P: IntoIterator<Item = S>,
        N: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let positive: HashSet<String> = positive.into_iter().map(|t| t.as_ref().to_lowercase()).collect();
        let negative: HashSet<String> = negative.into_iter().map(|t| t.as_ref().to_lowercase()).collect();
        if let Some(term) = positive.intersection(&negative).next() {
            return Err(Error::InvalidConfig(format!(
                "lexicon term {term:?} is both positive and negative"
            )));
        }
        Ok(LexiconSource { positive, negative })
    }

    /// Reads a two-column TSV of `term<TAB>positive|negative`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        for (line, cells) in read_tsv(path)? {
            if cells.len() != 2 {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("expected 2 columns, found {}", cells.len()),
                });
            }
            match cells[1].parse::<Sentiment>() {
                Ok(Sentiment::Positive) => positive.push(cells[0].clone()),
                Ok(Sentiment::Negative) => negative.push(cells[0].clone()),
                _ => {
                    return Err(Error::UnknownSentiment {
                        path: path.to_path_buf(),
                        line,
                        value: cells[1].clone(),
                    })
                }
            }
        }
        Self::new(positive, negative)
    }

    /// Counts (positive, negative) hits. Tokens are whitespace-delimited with
    /// surrounding punctuation trimmed, so `unstable!!` still matches `unstable`.
    pub fn hits(&self, text: &str) -> (usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        for token in text.split_whitespace() {
            let token = token.trim_matches(|c: char| c.is_ascii_punctuation());
            let token = token.to_lowercase();
            if self.positive.contains(&token) {
                pos += 1;
            } else if self.negative.contains(&token) {
                neg += 1;
            }
        }
        (pos, neg)
    }
}

impl SentimentSource for LexiconSource {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn predict(&self, text: &str) -> Sentiment {
        lexicon_predict(text, self)
    }
}

pub fn lexicon_predict(text: &str, lex: &LexiconSource) -> Sentiment {
    let (pos, neg) = lex.hits(text);
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Sentiment::Positive,
        std::cmp::Ordering::Less => Sentiment::Negative,
        std::cmp::Ordering::Equal => Sentiment::Neutral,
    }
}

/// Precomputed sentiments keyed by instance id, as written by the exporter.
#[derive(Debug, Clone, Default)]
pub struct FileSource {
    name: String,
    map: HashMap<String, Sentiment>,
    counts: BTreeMap<Sentiment, usize>,
}

impl FileSource {
    pub fn from_map(name: impl Into<String>, map: HashMap<String, Sentiment>) -> Self {
        let mut counts = BTreeMap::new();
        for s in map.values() {
            *counts.entry(*s).or_insert(0) += 1;
        }
        FileSource {
            name: name.into(),
            map,
            counts,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn counts(&self) -> &BTreeMap<Sentiment, usize> {
        &self.counts
    }

    pub fn get(&self, id: &str) -> Option<Sentiment> {
        self.map.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<Sentiment> {
        self.get(id).ok_or_else(|| Error::MissingId {
            id: id.to_string(),
            source_name: self.name.clone(),
        })
    }
}

/// Loads a sentiment TSV: `id<TAB>sentiment`, optional `id\tsentiment` header.
pub fn load_sentiment_file(path: impl AsRef<Path>) -> Result<FileSource> {
    let path = path.as_ref();
    let mut rows = read_tsv(path)?.into_iter().peekable();
    if let Some((_, first)) = rows.peek() {
        if first.first().map(String::as_str) == Some("id") {
            rows.next();
        }
    }
    let mut map = HashMap::new();
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (line, cells) in rows {
        if cells.len() != 2 {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected 2 columns, found {}", cells.len()),
            });
        }
        let sentiment = cells[1]
            .parse::<Sentiment>()
            .map_err(|value| Error::UnknownSentiment {
                path: path.to_path_buf(),
                line,
                value,
            })?;
        if let Some(first_line) = lines.insert(cells[0].clone(), line) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: cells[0].clone(),
                first_line,
                line,
            });
        }
        map.insert(cells[0].clone(), sentiment);
    }
    Ok(FileSource::from_map(path.display().to_string(), map))
}

/// Writes `id<TAB>sentiment` rows for every instance carrying a sentiment.
pub fn write_sentiment_file<W: Write>(d: &Dataset, mut out: W) -> Result<()> {
    let io = |e| Error::io(PathBuf::from("<sentiment output>"), e);
    writeln!(out, "id\tsentiment").map_err(io)?;
    for inst in d.iter() {
        let s = inst
            .sentiment
            .ok_or_else(|| Error::MissingSentiment { id: inst.id.clone() })?;
        writeln!(out, "{}\t{}", inst.id, s).map_err(io)?;
    }
    Ok(())
}

/// Prefixes the sentiment word and a single space to the text.
pub fn prepend_sentiment(inst: &Instance, s: Sentiment) -> Instance {
    Instance {
        id: inst.id.clone(),
        text: format!("{} {}", s.as_str(), inst.text),
        label: inst.label,
        sentiment: Some(s),
    }
}

/// Inverse of [`prepend_sentiment`] on the text: drops everything up to and
/// including the first space.
pub fn strip_sentiment(text: &str) -> Option<(Sentiment, &str)> {
    let (head, rest) = text.split_once(' ')?;
    Some((head.parse().ok()?, rest))
}

/// Where augmentation takes its sentiments from.
#[derive(Clone, Copy)]
pub enum SentimentInput<'a> {
    Predictor(&'a dyn SentimentSource),
    File(&'a FileSource),
}

impl SentimentInput<'_> {
    pub fn sentiment_for(&self, inst: &Instance) -> Result<Sentiment> {
        match self {
            SentimentInput::Predictor(src) => Ok(src.predict(&inst.text)),
            SentimentInput::File(file) => file.lookup(&inst.id),
        }
    }
}

/// Builds the sentiment-prepended variant of a dataset, preserving order.
pub fn augment_dataset(d: &Dataset, src: SentimentInput<'_>) -> Result<Dataset> {
    let instances = d
        .iter()
        .map(|inst| Ok(prepend_sentiment(inst, src.sentiment_for(inst)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(format!("{}-pps", d.name), instances))
}

/// Attaches sentiments without changing the text (for analysis of a dataset
/// whose text must stay as-is, e.g. the gold side of a comparison).
pub fn attach_sentiments(d: &Dataset, src: SentimentInput<'_>) -> Result<Dataset> {
    let instances = d
        .iter()
        .map(|inst| {
            let mut out = inst.clone();
            out.sentiment = Some(src.sentiment_for(inst)?);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(d.name.clone(), instances))
}

/// Label × sentiment contingency table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentDistribution {
    /// `counts[label.index()][sentiment.index()]`
    pub counts: [[usize; 3]; 2],
}

impl SentimentDistribution {
    pub fn count(&self, label: Label, s: Sentiment) -> usize {
        self.counts[label.index()][s.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, label: Label) -> usize {
        self.counts[label.index()].iter().sum()
    }

    pub fn sentiment_total(&self, s: Sentiment) -> usize {
        Label::ALL.iter().map(|&l| self.count(l, s)).sum()
    }

    /// Share of `label`'s instances carrying `s`; 0 for an empty row.
    pub fn row_fraction(&self, label: Label, s: Sentiment) -> f64 {
        let row = self.row_total(label);
        if row == 0 {
            0.0
        } else {
            self.count(label, s) as f64 / row as f64
        }
    }

    pub fn modal(&self) -> Sentiment {
        *Sentiment::ALL
            .iter()
            .max_by_key(|&&s| (self.sentiment_total(s), std::cmp::Reverse(s.index())))
            .expect("non-empty")
    }

    /// Long-format CSV: `label,sentiment,count,row_fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,sentiment,count,row_fraction\n");
        for label in Label::ALL {
            for s in Sentiment::ALL {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    label,
                    s,
                    self.count(label, s),
                    self.row_fraction(label, s)
                ));
            }
        }
        out
    }
}

impl fmt::Display for SentimentDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>10} {:>10} {:>10}",
            "", "negative", "neutral", "positive"
        )?;
        for label in Label::ALL {
            write!(f, "{:<6}", label.as_str())?;
            for s in Sentiment::ALL {
                write!(
                    f,
                    " {:>5} {:>3.0}%",
                    self.count(label, s),
                    100.0 * self.row_fraction(label, s)
                )?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn sentiment_distribution(d: &Dataset) -> Result<SentimentDistribution> {
    let mut counts = [[0usize; 3]; 2];
    for inst in d.iter() {
        let label = inst
            .label
            .ok_or_else(|| Error::UnlabeledInstance { id: inst.id.clone() })?;
        let s = inst
            .sentiment
            .ok_or_else(|| Error::MissingSentiment { id: inst.id.clone() })?;
        counts[label.index()][s.index()] += 1;
    }
    Ok(SentimentDistribution { counts })
}
