//! OLID-format dataset ingestion, statistics, and stratified dev splits.
//!
//! Files are UTF-8, tab-separated, with columns `id`, `tweet`, `subtask_a`.
//! A header row is recognised by its first cell being the literal `id`.
//! Additional columns (OLID ships `subtask_b`/`subtask_c`) are ignored, except
//! for a header column named `sentiment`, which is read back so that
//! sentiment-prepended datasets round-trip through [`write_olid`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sentiment::Sentiment;

/// Gold label for OLID subtask A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NOT")]
    Not,
    #[serde(rename = "OFF")]
    Off,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Not, Label::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Not => "NOT",
            Label::Off => "OFF",
        }
    }

    /// Row/column index used by confusion matrices and weight tables.
    pub fn index(self) -> usize {
        match self {
            Label::Not => 0,
            Label::Off => 1,
        }
    }

    /// `+1` for OFF, `-1` for NOT.
    pub fn sign(self) -> f64 {
        match self {
            Label::Not => -1.0,
            Label::Off => 1.0,
        }
    }

    /// 1.0 for OFF, 0.0 for NOT (binary target for sigmoid outputs).
    pub fn target(self) -> f64 {
        match self {
            Label::Not => 0.0,
            Label::Off => 1.0,
        }
    }

    /// Case-insensitive parse, used for externally produced prediction files.
    pub fn parse_loose(s: &str) -> Option<Label> {
        if s.eq_ignore_ascii_case("OFF") {
            Some(Label::Off)
        } else if s.eq_ignore_ascii_case("NOT") {
            Some(Label::Not)
        } else {
            None
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelError(pub String);

impl fmt::Display for ParseLabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown label {:?}", self.0)
    }
}

impl std::error::Error for ParseLabelError {}

impl FromStr for Label {
    type Err = ParseLabelError;

    /// Strict parse: only the exact strings `OFF` and `NOT` are accepted.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "OFF" => Ok(Label::Off),
            "NOT" => Ok(Label::Not),
            other => Err(ParseLabelError(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub label: Option<Label>,
    pub sentiment: Option<Sentiment>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<Label>) -> Self {
        Instance {
            id: id.into(),
            text: text.into(),
            label,
            sentiment: None,
        }
    }

    pub fn labeled(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Self::new(id, text, Some(label))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, instances: Vec<Instance>) -> Self {
        Dataset {
            name: name.into(),
            instances,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|i| i.text.as_str())
    }

    /// Gold labels in order; fails on the first unlabeled instance.
    pub fn labels(&self) -> Result<Vec<Label>> {
        self.instances
            .iter()
            .map(|i| {
                i.label
                    .ok_or_else(|| Error::UnlabeledInstance { id: i.id.clone() })
            })
            .collect()
    }

    /// Attaches gold labels from an id → label map (OLID ships test labels
    /// in a separate file). Every instance must be covered.
    pub fn with_labels(mut self, labels: &BTreeMap<String, Label>, source_name: &str) -> Result<Self> {
        for inst in &mut self.instances {
            let label = labels.get(&inst.id).ok_or_else(|| Error::MissingId {
                id: inst.id.clone(),
                source_name: source_name.to_string(),
            })?;
            inst.label = Some(*label);
        }
        Ok(self)
    }

    /// Concatenates two datasets, checking id uniqueness across both.
    pub fn concat(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset> {
        let mut seen = HashMap::new();
        let mut instances = Vec::with_capacity(self.len() + other.len());
        for (pos, inst) in self.iter().chain(other.iter()).enumerate() {
            if let Some(first) = seen.insert(inst.id.clone(), pos + 1) {
                return Err(Error::DuplicateId {
                    path: PathBuf::from("<concat>"),
                    id: inst.id.clone(),
                    first_line: first,
                    line: pos + 1,
                });
            }
            instances.push(inst.clone());
        }
        Ok(Dataset::new(name, instances))
    }
}

/// Reads a UTF-8 tab-separated file into `(1-based line number, cells)` rows.
/// Blank lines are skipped; a trailing `\r` is stripped.
pub(crate) fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in content.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        rows.push((idx + 1, line.split('\t').map(str::to_string).collect()));
    }
    Ok(rows)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Loads an OLID subtask-A TSV file.
///
/// With `has_labels` the third column must hold `OFF` or `NOT`; otherwise
/// only `id` and `tweet` are required. Errors name the offending line.
pub fn load_olid(path: impl AsRef<Path>, has_labels: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let rows = read_tsv(path)?;
    let mut rows = rows.into_iter().peekable();

    let required = if has_labels { 3 } else { 2 };
    let mut expected_cols = None;
    let mut sentiment_col = None;
    if let Some((_, first)) = rows.peek() {
        if first.first().map(String::as_str) == Some("id") {
            expected_cols = Some(first.len());
            sentiment_col = first.iter().position(|c| c == "sentiment");
            rows.next();
        }
    }

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut instances = Vec::new();
    let mut warned_extra = false;
    for (line, cells) in rows {
        if let Some(n) = expected_cols {
            if cells.len() != n {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("expected {n} columns (per header), found {}", cells.len()),
                });
            }
        }
        if cells.len() < required {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected at least {required} columns, found {}", cells.len()),
            });
        }
        if cells.len() > required && !warned_extra && sentiment_col.is_none() {
            log::warn!(
                "{}: ignoring {} extra column(s) beyond id/tweet{}",
                path.display(),
                cells.len() - required,
                if has_labels { "/subtask_a" } else { "" }
            );
            warned_extra = true;
        }

        let id = cells[0].clone();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: "empty id".to_string(),
            });
        }
        let text = cells[1].clone();
        if text.trim().is_empty() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: "empty tweet text".to_string(),
            });
        }
        let label = if has_labels {
            Some(cells[2].parse::<Label>().map_err(|e| Error::UnknownLabel {
                path: path.to_path_buf(),
                line,
                value: e.0,
            })?)
        } else {
            None
        };
        let sentiment =
            match sentiment_col {
                Some(col) if !cells[col].is_empty() => Some(cells[col].parse::<Sentiment>().map_err(
                    |_| Error::UnknownSentiment {
                        path: path.to_path_buf(),
                        line,
                        value: cells[col].clone(),
                    },
                )?),
                _ => None,
            };
        if let Some(first_line) = seen.insert(id.clone(), line) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id,
                first_line,
                line,
            });
        }
        instances.push(Instance {
            id,
            text,
            label,
            sentiment,
        });
    }

    Ok(Dataset::new(dataset_name(path), instances))
}

/// Writes a dataset in the same TSV format [`load_olid`] reads, with a header.
///
/// The label column is written when every instance is labeled; a trailing
/// `sentiment` column is added when any instance carries a sentiment.
pub fn write_olid<W: Write>(d: &Dataset, mut out: W) -> std::io::Result<()> {
    let labeled = !d.is_empty() && d.iter().all(|i| i.label.is_some());
    let with_sentiment = d.iter().any(|i| i.sentiment.is_some());
    let mut header = vec!["id", "tweet"];
    if labeled {
        header.push("subtask_a");
    }
    if with_sentiment {
        header.push("sentiment");
    }
    writeln!(out, "{}", header.join("\t"))?;
    for inst in d.iter() {
        write!(out, "{}\t{}", inst.id, inst.text)?;
        if labeled {
            write!(out, "\t{}", inst.label.map(Label::as_str).unwrap_or_default())?;
        }
        if with_sentiment {
            write!(
                out,
                "\t{}",
                inst.sentiment.map(Sentiment::as_str).unwrap_or_default()
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_olid(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_olid(d, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_instances: usize,
    pub counts: BTreeMap<Label, usize>,
    pub fractions: BTreeMap<Label, f64>,
    pub mean_tokens: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl CorpusStats {
    pub fn count(&self, label: Label) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn fraction(&self, label: Label) -> f64 {
        self.fractions.get(&label).copied().unwrap_or(0.0)
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instances      {}", self.n_instances)?;
        for label in Label::ALL {
            writeln!(
                f,
                "{:<14} {} ({:.2}%)",
                label.as_str(),
                self.count(label),
                100.0 * self.fraction(label)
            )?;
        }
        writeln!(f, "mean tokens    {:.2}", self.mean_tokens)?;
        write!(f, "token range    {}..={}", self.min_tokens, self.max_tokens)
    }
}

/// Label counts and whitespace-token length statistics over raw text.
pub fn dataset_stats(d: &Dataset) -> Result<CorpusStats> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = d.labels()?;
    let n = d.len();
    let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for label in labels {
        *counts.entry(label).or_default() += 1;
    }
    let fractions = counts.iter().map(|(&l, &c)| (l, c as f64 / n as f64)).collect();

    let lengths: Vec<usize> = d.texts().map(|t| t.split_whitespace().count()).collect();
    let total: usize = lengths.iter().sum();
    Ok(CorpusStats {
        n_instances: n,
        counts,
        fractions,
        mean_tokens: total as f64 / n as f64,
        min_tokens: lengths.iter().copied().min().unwrap_or(0),
        max_tokens: lengths.iter().copied().max().unwrap_or(0),
    })
}

/// Stratified random train/dev split.
///
/// Each label contributes `round(dev_fraction * count)` instances to dev,
/// at least one, and must keep at least one in train. Both sides keep the
/// input's relative order.
pub fn make_dev_split(d: &Dataset, dev_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "dev fraction {dev_fraction} outside (0, 1)"
        )));
    }
    let labels = d.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_dev = vec![false; d.len()];
    for label in Label::ALL {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n == 0 {
            return Err(Error::InvalidSplit(format!("no {label} instances")));
        }
        let k = ((dev_fraction * n as f64).round() as usize).max(1);
        if k >= n {
            return Err(Error::InvalidSplit(format!(
                "fraction {dev_fraction} leaves no {label} instances in train ({n} available)"
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            in_dev[i] = true;
        }
    }

    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (inst, &is_dev) in d.iter().zip(&in_dev) {
        if is_dev {
            dev.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    Ok((
        Dataset::new(format!("{}-train", d.name), train),
        Dataset::new(format!("{}-dev", d.name), dev),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn toy(n_not: usize, n_off: usize) -> Dataset {
        let mut instances = Vec::new();
        for i in 0..n_not {
            instances.push(Instance::labeled(format!("n{i}"), format!("not {i}"), Label::Not));
        }
        for i in 0..n_off {
            instances.push(Instance::labeled(format!("o{i}"), format!("off {i}"), Label::Off));
        }
        Dataset::new("toy", instances)
    }

    #[test]
    fn loads_olid_row() {
        let f = write_tmp(
            "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c\n86426\t@USER She should ask a few native Americans what their take on this is.\tOFF\tUNT\tNULL\n",
        );
        let d = load_olid(f.path(), true).unwrap();
        assert_eq!(d.len(), 1);
        let inst = &d.instances[0];
        assert_eq!(inst.id, "86426");
        assert_eq!(inst.label, Some(Label::Off));
        assert_eq!(
            inst.text,
            "@USER She should ask a few native Americans what their take on this is."
        );
    }

    #[test]
    fn headerless_and_crlf() {
        let f = write_tmp("1\thello there\tNOT\r\n2\tyou idiot\tOFF\r\n");
        let d = load_olid(f.path(), true).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.instances[0].text, "hello there");
        assert_eq!(d.instances[1].label, Some(Label::Off));
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let f = write_tmp("id\ttweet\tsubtask_a\n1\ta\tNOT\n1\tb\tOFF\n");
        match load_olid(f.path(), true).unwrap_err() {
            Error::DuplicateId {
                id, first_line, line, ..
            } => {
                assert_eq!(id, "1");
                assert_eq!(first_line, 2);
                assert_eq!(line, 3);
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let f = write_tmp("1\tsome text\tMAYBE\n");
        match load_olid(f.path(), true).unwrap_err() {
            Error::UnknownLabel { line, value, .. } => {
                assert_eq!(line, 1);
                assert_eq!(value, "MAYBE");
            }
            e => panic!("unexpected error {e}"),
        }
        // strict: lowercase is not accepted in gold files
        let f = write_tmp("1\tsome text\toff\n");
        assert!(matches!(
            load_olid(f.path(), true),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn malformed_rows() {
        let f = write_tmp("1\tonly two columns\n");
        assert!(matches!(
            load_olid(f.path(), true),
            Err(Error::MalformedRow { line: 1, .. })
        ));
        // a tab inside the tweet shifts columns relative to the header
        let f = write_tmp("id\ttweet\tsubtask_a\n1\tfoo\tbar\tNOT\n");
        assert!(matches!(
            load_olid(f.path(), true),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let f = write_tmp("1\t   \tNOT\n");
        assert!(matches!(
            load_olid(f.path(), true),
            Err(Error::MalformedRow { .. })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_olid("/nonexistent/olid.tsv", true),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unlabeled_test_file() {
        let f = write_tmp("id\ttweet\n15923\t#WhoIsQ #WherestheServer\n");
        let d = load_olid(f.path(), false).unwrap();
        assert_eq!(d.instances[0].label, None);
    }

    #[test]
    fn stats_single_off() {
        let d = Dataset::new("one", vec![Instance::labeled("1", "a b c", Label::Off)]);
        let s = dataset_stats(&d).unwrap();
        assert_eq!(s.fraction(Label::Off), 1.0);
        assert_eq!(s.fraction(Label::Not), 0.0);
        assert_eq!(s.mean_tokens, 3.0);
        assert_eq!((s.min_tokens, s.max_tokens), (3, 3));
    }

    #[test]
    fn stats_errors() {
        assert!(matches!(
            dataset_stats(&Dataset::default()),
            Err(Error::EmptyDataset)
        ));
        let d = Dataset::new("u", vec![Instance::new("1", "x", None)]);
        assert!(matches!(dataset_stats(&d), Err(Error::UnlabeledInstance { .. })));
    }

    #[test]
    fn olid_label_fractions() {
        // label counts of the OLID training release; the published percentages
        // (32.90 / 67.10) are 4640/14100 = 32.908% and 67.092% adjusted to sum to 100
        let d = toy(9460, 4640);
        let s = dataset_stats(&d).unwrap();
        assert_eq!(s.n_instances, 14_100);
        assert!((100.0 * s.fraction(Label::Off) - 32.90).abs() < 0.01);
        assert!((100.0 * s.fraction(Label::Not) - 67.10).abs() < 0.01);
    }

    #[test]
    fn dev_split_rounding() {
        let d = toy(67, 33);
        let (train, dev) = make_dev_split(&d, 0.1, 42).unwrap();
        let dev_labels = dev.labels().unwrap();
        let n_not = dev_labels.iter().filter(|&&l| l == Label::Not).count();
        let n_off = dev_labels.len() - n_not;
        assert_eq!((n_not, n_off), (7, 3));
        assert_eq!(train.len(), 90);

        let (train2, dev2) = make_dev_split(&d, 0.1, 42).unwrap();
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
    }

    #[test]
    fn dev_split_requires_both_sides() {
        // one instance per class cannot populate both train and dev
        let d = toy(1, 1);
        assert!(matches!(make_dev_split(&d, 0.5, 1), Err(Error::InvalidSplit(_))));
        let d = toy(2, 2);
        let (train, dev) = make_dev_split(&d, 0.5, 1).unwrap();
        assert_eq!((train.len(), dev.len()), (2, 2));
        assert!(matches!(
            make_dev_split(&toy(5, 0), 0.2, 1),
            Err(Error::InvalidSplit(_))
        ));
    }

    #[test]
    fn write_then_load_roundtrip() {
        let mut d = toy(3, 2);
        d.instances[1].sentiment = Some(Sentiment::Negative);
        d.instances[2].sentiment = Some(Sentiment::Neutral);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_olid(&d, f.path()).unwrap();
        let mut back = load_olid(f.path(), true).unwrap();
        back.name = d.name.clone();
        assert_eq!(back, d);
    }
}
