//! Word and character n-gram features with smoothed TF-IDF weighting.
//!
//! Weights are `tf * idf` with raw counts for `tf` and
//! `idf = ln((1 + n_docs) / (1 + df)) + 1`, followed by one L2 normalization
//! over the concatenation of all blocks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramKind {
    Word,
    Char,
}

/// One n-gram block, e.g. word bigrams or character 3-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureBlockSpec {
    kind: GramKind,
    n: usize,
}

impl FeatureBlockSpec {
    pub const MAX_N: usize = 4;

    pub fn new(kind: GramKind, n: usize) -> Result<Self> {
        if !(1..=Self::MAX_N).contains(&n) {
            return Err(Error::InvalidConfig(format!(
                "n-gram order {n} outside 1..={}",
                Self::MAX_N
            )));
        }
        Ok(FeatureBlockSpec { kind, n })
    }

    pub fn word(n: usize) -> Self {
        Self::new(GramKind::Word, n).expect("n-gram order in range")
    }

    pub fn char(n: usize) -> Self {
        Self::new(GramKind::Char, n).expect("n-gram order in range")
    }

    pub fn kind(&self) -> GramKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl fmt::Display for FeatureBlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            GramKind::Word => "word",
            GramKind::Char => "char",
        };
        write!(f, "{kind}-{}", self.n)
    }
}

impl FromStr for FeatureBlockSpec {
    type Err = Error;

    /// Accepts `word-2` / `char-3` and the short forms `w2` / `c3`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown feature block {s:?}"));
        let (kind, n) = if let Some(rest) = s.strip_prefix("word-") {
            (GramKind::Word, rest)
        } else if let Some(rest) = s.strip_prefix("char-") {
            (GramKind::Char, rest)
        } else if let Some(rest) = s.strip_prefix('w') {
            (GramKind::Word, rest)
        } else if let Some(rest) = s.strip_prefix('c') {
            (GramKind::Char, rest)
        } else {
            return Err(bad());
        };
        let n = n.parse::<usize>().map_err(|_| bad())?;
        Self::new(kind, n)
    }
}

impl Serialize for FeatureBlockSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureBlockSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn tokenize_words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// All n-grams of one block, in text order, duplicates kept.
pub fn extract_ngrams(text: &str, spec: FeatureBlockSpec) -> Vec<String> {
    match spec.kind {
        GramKind::Word => {
            let tokens = tokenize_words(text);
            if tokens.len() < spec.n {
                return Vec::new();
            }
            tokens.windows(spec.n).map(|w| w.join(" ")).collect()
        }
        GramKind::Char => {
            let chars: Vec<char> = text.chars().collect();
            if chars.len() < spec.n {
                return Vec::new();
            }
            chars.windows(spec.n).map(|w| w.iter().collect()).collect()
        }
    }
}

/// Sparse vector as column-sorted `(column, weight)` pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Builds from pairs in any order; repeated columns are summed.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|&(c, _)| c);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (c, w) in pairs {
            match entries.last_mut() {
                Some((last, acc)) if *last == c => *acc += w,
                _ => entries.push((c, w)),
            }
        }
        SparseVector { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, column: usize) -> f64 {
        self.entries
            .binary_search_by_key(&column, |&(c, _)| c)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    /// One past the largest column, 0 when empty.
    pub fn min_dim(&self) -> usize {
        self.entries.last().map(|&(c, _)| c + 1).unwrap_or(0)
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(c, w)| w * dense[c]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            for (_, w) in &mut self.entries {
                *w /= norm;
            }
        }
        self
    }
}

const VOCAB_MAGIC: &str = "offlang-vocab";
const VOCAB_VERSION: u32 = 1;

/// Frozen n-gram → column mapping with document frequencies.
///
/// Columns are laid out block by block in block order, grams sorted
/// lexicographically inside each block.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    blocks: Vec<FeatureBlockSpec>,
    offsets: Vec<usize>,
    index: Vec<HashMap<String, usize>>,
    grams: Vec<String>,
    df: Vec<usize>,
    n_docs: usize,
}

impl Vocabulary {
    pub fn build<'a, I>(docs: I, blocks: &[FeatureBlockSpec]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("no feature blocks".into()));
        }
        let mut per_block: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); blocks.len()];
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            for (b, spec) in blocks.iter().enumerate() {
                let unique: HashSet<String> = extract_ngrams(doc, *spec).into_iter().collect();
                for gram in unique {
                    *per_block[b].entry(gram).or_insert(0) += 1;
                }
            }
        }
        if n_docs == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut entries = Vec::with_capacity(blocks.len());
        for (b, map) in per_block.into_iter().enumerate() {
            entries.extend(map.into_iter().map(|(g, df)| (b, g, df)));
        }
        Self::from_entries(blocks.to_vec(), n_docs, entries)
    }

    fn from_entries(
        blocks: Vec<FeatureBlockSpec>,
        n_docs: usize,
        entries: Vec<(usize, String, usize)>,
    ) -> Result<Self> {
        let mut index = vec![HashMap::new(); blocks.len()];
        let mut offsets = vec![0; blocks.len() + 1];
        let mut grams = Vec::with_capacity(entries.len());
        let mut df = Vec::with_capacity(entries.len());
        let mut prev_block = 0;
        for (b, gram, d) in entries {
            if b < prev_block || b >= blocks.len() {
                return Err(Error::format("vocabulary", "blocks out of order"));
            }
            if d == 0 || d > n_docs {
                return Err(Error::format(
                    "vocabulary",
                    format!("document frequency {d} outside 1..={n_docs}"),
                ));
            }
            for off in offsets.iter_mut().take(b + 1).skip(prev_block + 1) {
                *off = grams.len();
            }
            prev_block = b;
            let col = grams.len();
            if index[b].insert(gram.clone(), col).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate gram {gram:?}")));
            }
            grams.push(gram);
            df.push(d);
        }
        for off in offsets.iter_mut().skip(prev_block + 1) {
            *off = grams.len();
        }
        Ok(Vocabulary {
            blocks,
            offsets,
            index,
            grams,
            df,
            n_docs,
        })
    }

    pub fn blocks(&self) -> &[FeatureBlockSpec] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.grams.len()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Column range owned by block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn column(&self, block: usize, gram: &str) -> Option<usize> {
        self.index.get(block)?.get(gram).copied()
    }

    pub fn gram(&self, column: usize) -> &str {
        &self.grams[column]
    }

    pub fn df(&self, column: usize) -> usize {
        self.df[column]
    }

    pub fn idf(&self, column: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df[column] as f64)).ln() + 1.0
    }

    /// TF-IDF weights before normalization. Unknown grams are dropped.
    pub fn weigh(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (b, spec) in self.blocks.iter().enumerate() {
            for gram in extract_ngrams(text, *spec) {
                if let Some(&col) = self.index[b].get(&gram) {
                    *counts.entry(col).or_insert(0) += 1;
                }
            }
        }
        SparseVector {
            entries: counts
                .into_iter()
                .map(|(c, tf)| (c, tf as f64 * self.idf(c)))
                .collect(),
        }
    }

    /// Unit-norm TF-IDF vector; empty when no gram is in the vocabulary.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        self.weigh(text).normalized()
    }

    pub fn vectorize_all<'a, I>(&self, texts: I) -> Vec<SparseVector>
    where
        I: IntoIterator<Item = &'a str>,
    {
        texts.into_iter().map(|t| self.vectorize(t)).collect()
    }

    /// Line-oriented serialization:
    ///
    /// ```text
    /// offlang-vocab<TAB>1
    /// n_docs<TAB><N>
    /// blocks<TAB>word-1,char-3
    /// <block index><TAB><df><TAB><escaped gram>     (one per column, in column order)
    /// ```
    ///
    /// Grams escape `\`, tab, LF and CR as `\\`, `\t`, `\n`, `\r`.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{VOCAB_MAGIC}\t{VOCAB_VERSION}")?;
        writeln!(out, "n_docs\t{}", self.n_docs)?;
        let blocks: Vec<String> = self.blocks.iter().map(ToString::to_string).collect();
        writeln!(out, "blocks\t{}", blocks.join(","))?;
        for b in 0..self.blocks.len() {
            for col in self.block_range(b) {
                writeln!(out, "{b}\t{}\t{}", self.df[col], escape(&self.grams[col]))?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let ctx = "vocabulary";
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::format(ctx, "unexpected end of file"))?
                .map_err(|e| Error::format(ctx, e.to_string()))
        };
        let header = next()?;
        if header != format!("{VOCAB_MAGIC}\t{VOCAB_VERSION}") {
            return Err(Error::format(ctx, format!("bad header {header:?}")));
        }
        let n_docs = next()?
            .strip_prefix("n_docs\t")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(ctx, "bad n_docs line"))?;
        let blocks_line = next()?;
        let blocks = blocks_line
            .strip_prefix("blocks\t")
            .ok_or_else(|| Error::format(ctx, "bad blocks line"))?
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<FeatureBlockSpec>>>()?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::format(ctx, e.to_string()))?;
            let mut parts = line.splitn(3, '\t');
            let (b, d, g) = match (parts.next(), parts.next(), parts.next()) {
                (Some(b), Some(d), Some(g)) => (b, d, g),
                _ => return Err(Error::format(ctx, format!("bad entry {line:?}"))),
            };
            let b = b
                .parse::<usize>()
                .map_err(|_| Error::format(ctx, format!("bad block index {b:?}")))?;
            let d = d
                .parse::<usize>()
                .map_err(|_| Error::format(ctx, format!("bad df {d:?}")))?;
            entries.push((b, unescape(g)?, d));
        }
        Self::from_entries(blocks, n_docs, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::format(
                    "vocabulary",
                    format!("bad escape \\{}", other.map(String::from).unwrap_or_default()),
                ))
            }
        }
    }
    Ok(out)
}
