//! Tweet normalization: lowercasing, user-mention replacement, hashtag
//! symbol removal, and collapsing of repeated characters.

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

const MENTION: &str = "@user";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormConfig {
    /// Runs of at least this many identical characters are collapsed.
    pub collapse_run_min: usize,
    /// Length a collapsed run is shortened to.
    pub collapse_run_to: usize,
    pub user_token: String,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            collapse_run_min: 3,
            collapse_run_to: 2,
            user_token: "<user>".to_string(),
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collapse_run_to < 1 || self.collapse_run_min <= self.collapse_run_to {
            return Err(Error::InvalidConfig(format!(
                "need collapse_run_min > collapse_run_to >= 1, got {} and {}",
                self.collapse_run_min, self.collapse_run_to
            )));
        }
        let tok = &self.user_token;
        if tok.is_empty() || *tok != tok.to_lowercase() {
            return Err(Error::InvalidConfig(format!(
                "user_token must be non-empty and lowercase, got {tok:?}"
            )));
        }
        // the token itself has to survive the pipeline unchanged
        if tok.contains('#') || tok.contains(MENTION) || longest_run(tok) >= self.collapse_run_min {
            return Err(Error::InvalidConfig(format!(
                "user_token {tok:?} is not stable under normalization"
            )));
        }
        Ok(())
    }
}

fn longest_run(s: &str) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for c in s.chars() {
        if Some(c) == prev {
            run += 1;
        } else {
            run = 1;
            prev = Some(c);
        }
        best = best.max(run);
    }
    best
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Replaces every `@user` that stands as a whole token (not preceded or
/// followed by a word character).
fn replace_mentions(text: &str, token: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut prev: Option<char> = None;
    let mut rest = text;
    while let Some(pos) = rest.find(MENTION) {
        let before = rest[..pos].chars().next_back().or(prev);
        let after = rest[pos + MENTION.len()..].chars().next();
        let bounded = !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char);
        if bounded {
            out.push_str(&rest[..pos]);
            out.push_str(token);
            prev = token.chars().next_back();
            rest = &rest[pos + MENTION.len()..];
        } else {
            // step past the '@' and keep scanning
            out.push_str(&rest[..pos + 1]);
            prev = Some('@');
            rest = &rest[pos + 1..];
        }
    }
    out.push_str(rest);
    out
}

fn collapse_runs(text: &str, min: usize, to: usize) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let mut run = 1;
        while chars.peek() == Some(&c) {
            chars.next();
            run += 1;
        }
        let keep = if run >= min { to } else { run };
        for _ in 0..keep {
            out.push(c);
        }
    }
    out
}

fn apply_rules(text: &str, cfg: &NormConfig) -> String {
    let lowered = text.to_lowercase();
    let mentioned = replace_mentions(&lowered, &cfg.user_token);
    let unhashed: String = mentioned.chars().filter(|&c| c != '#').collect();
    collapse_runs(&unhashed, cfg.collapse_run_min, cfg.collapse_run_to)
}

/// Normalizes one tweet.
///
/// Rules run in a fixed order: lowercase, `@user` mention → `user_token`,
/// delete `#`, collapse character runs. Deleting `#` can join the pieces of a
/// mention (`@us#er`), so the sequence is repeated until the text stops
/// changing; in practice this takes at most two passes.
pub fn normalize(text: &str, cfg: &NormConfig) -> String {
    let mut current = apply_rules(text, cfg);
    loop {
        let next = apply_rules(&current, cfg);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Normalizes every instance's text; ids, labels, sentiments and order are kept.
pub fn normalize_dataset(d: &Dataset, cfg: &NormConfig) -> Dataset {
    let instances = d
        .iter()
        .map(|inst| {
            let mut inst = inst.clone();
            inst.text = normalize(&inst.text, cfg);
            inst
        })
        .collect();
    Dataset::new(d.name.clone(), instances)
}
