//! Binary cross-entropy, focal loss, and balanced class weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs, which
/// caps a single example's loss at about 27.6.
pub const EPS: f64 = 1e-12;

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `weight * -(y ln p + (1 - y) ln(1 - p))`.
pub fn bce(p: f64, y: f64, weight: f64) -> f64 {
    let p = clamp(p);
    -weight * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d bce(sigmoid(z), y) / dz.
pub fn bce_grad(logit: f64, y: f64, weight: f64) -> f64 {
    weight * (sigmoid(logit) - y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 1.0,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "focal alpha and gamma must be non-negative, got {} and {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// `-alpha (1 - p_t)^gamma ln(p_t)` with `p_t = p` for `y = 1`, else `1 - p`.
/// The same `alpha` applies to both classes.
pub fn focal(p: f64, y: f64, fp: FocalParams) -> f64 {
    let p = clamp(p);
    let pt = if y >= 0.5 { p } else { 1.0 - p };
    -fp.alpha * (1.0 - pt).powf(fp.gamma) * pt.ln()
}

/// Analytic d focal(sigmoid(z), y) / dz.
///
/// For `y = 1`, with `p = sigmoid(z)`:
/// `alpha (1 - p)^gamma (gamma p ln p - (1 - p))`; the `y = 0` case follows
/// from `focal(z, 0) = focal(-z, 1)`.
pub fn focal_grad(logit: f64, y: f64, fp: FocalParams) -> f64 {
    let (z, sign) = if y >= 0.5 { (logit, 1.0) } else { (-logit, -1.0) };
    let p = sigmoid(z);
    let q = sigmoid(-z); // 1 - p without cancellation
                         // ln p = -softplus(-z)
    let ln_p = -softplus(-z);
    let g = fp.alpha * q.powf(fp.gamma) * (fp.gamma * p * ln_p - q);
    sign * g
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-label loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub not: f64,
    pub off: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::uniform()
    }
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { not: 1.0, off: 1.0 }
    }

    pub fn new(not: f64, off: f64) -> Result<Self> {
        if !(not > 0.0 && off > 0.0) || !not.is_finite() || !off.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "class weights must be positive, got NOT={not} OFF={off}"
            )));
        }
        Ok(ClassWeights { not, off })
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Not => self.not,
            Label::Off => self.off,
        }
    }

    /// Balanced weights from the label counts of `labels`.
    pub fn balanced_for(labels: &[Label]) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for l in Label::ALL {
            counts.insert(l, 0);
        }
        for &l in labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        let w = balanced_class_weights(&counts)?;
        Ok(ClassWeights {
            not: w[&Label::Not],
            off: w[&Label::Off],
        })
    }
}

/// `w_c = n_total / (n_classes * n_c)` for every class in `counts`.
pub fn balanced_class_weights<K>(counts: &BTreeMap<K, usize>) -> Result<BTreeMap<K, f64>>
where
    K: Ord + Clone + std::fmt::Display,
{
    if counts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((k, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(Error::ZeroClassCount { class: k.to_string() });
    }
    let total: usize = counts.values().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|(c, &n)| (c.clone(), total as f64 / (k * n as f64)))
        .collect())
}
