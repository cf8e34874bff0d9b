//! Linear SVM on sparse TF-IDF vectors.
//!
//! Training minimizes the class-weighted hinge objective
//!
//! ```text
//! F(w, b) = (λ/2) ‖w‖² + (1/n) Σ c_i · max(0, 1 − y_i (w·x_i + b)),   λ = 1 / (C·n)
//! ```
//!
//! with OFF as `y = +1`, by Pegasos-style stochastic subgradient steps
//! `η_t = 1 / (λ t)`. The bias is unregularized. The returned model (and the
//! per-epoch objective log) is the average of the iterates over an epoch,
//! which removes most of the last-iterate jitter of the 1/t schedule.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::eval;
use crate::features::SparseVector;
use crate::losses::ClassWeights;

/// Regularizer values tried by the default grid search.
pub const DEFAULT_C_GRID: [f64; 5] = [1e-3, 1e-2, 0.1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    pub class_weights: ClassWeights,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            c: 1.0,
            epochs: 20,
            seed: 42,
            class_weights: ClassWeights::uniform(),
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "C must be positive, got {}",
                self.c
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        ClassWeights::new(self.class_weights.not, self.class_weights.off)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: LinearConfig,
    /// Fingerprint of the vocabulary the weights index into, when known.
    pub vocab_fingerprint: Option<String>,
    /// Training objective after each epoch.
    pub objective_history: Vec<f64>,
    pub convergence_warning: Option<String>,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &SparseVector) -> Result<f64> {
        check_dim(x, self.dim())?;
        Ok(x.dot(&self.weights) + self.bias)
    }

    /// OFF iff the score is strictly positive.
    pub fn predict(&self, x: &SparseVector) -> Result<(Label, f64)> {
        let score = self.score(x)?;
        Ok((label_for_score(score), score))
    }

    pub fn predict_all(&self, xs: &[SparseVector]) -> Result<Vec<Label>> {
        xs.iter().map(|x| self.predict(x).map(|(l, _)| l)).collect()
    }

    pub fn with_vocab_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.vocab_fingerprint = Some(fp.into());
        self
    }
}

pub fn predict_svm(m: &LinearModel, x: &SparseVector) -> Result<(Label, f64)> {
    m.predict(x)
}

fn label_for_score(score: f64) -> Label {
    if score > 0.0 {
        Label::Off
    } else {
        Label::Not
    }
}

fn check_dim(x: &SparseVector, dim: usize) -> Result<()> {
    if x.min_dim() > dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.min_dim(),
        });
    }
    Ok(())
}

/// Value of the weighted hinge objective.
pub fn hinge_objective(
    weights: &[f64],
    bias: f64,
    xs: &[SparseVector],
    ys: &[Label],
    class_weights: &ClassWeights,
    lambda: f64,
) -> f64 {
    let n = xs.len() as f64;
    let reg = 0.5 * lambda * weights.iter().map(|w| w * w).sum::<f64>();
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let margin = y.sign() * (x.dot(weights) + bias);
            class_weights.get(y) * (1.0 - margin).max(0.0)
        })
        .sum();
    reg + loss / n
}

/// A subgradient `(∂w, ∂b)` of [`hinge_objective`]; exact away from kinks.
pub fn hinge_subgradient(
    weights: &[f64],
    bias: f64,
    xs: &[SparseVector],
    ys: &[Label],
    class_weights: &ClassWeights,
    lambda: f64,
) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw: Vec<f64> = weights.iter().map(|w| lambda * w).collect();
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let margin = y.sign() * (x.dot(weights) + bias);
        if margin < 1.0 {
            let coef = class_weights.get(y) * y.sign() / n;
            for &(c, v) in x.entries() {
                gw[c] -= coef * v;
            }
            gb -= coef;
        }
    }
    (gw, gb)
}

/// Trains a linear SVM; deterministic for a fixed `cfg.seed`.
pub fn train_svm(xs: &[SparseVector], ys: &[Label], dim: usize, cfg: &LinearConfig) -> Result<LinearModel> {
    cfg.validate()?;
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if !(ys.contains(&Label::Off) && ys.contains(&Label::Not)) {
        return Err(Error::SingleClass);
    }
    for x in xs {
        check_dim(x, dim)?;
    }

    let n = xs.len();
    let lambda = 1.0 / (cfg.c * n as f64);
    // the optimum lies in this ball (the weighted loss at w = 0 is at most max c_i)
    let max_weight = cfg.class_weights.not.max(cfg.class_weights.off);
    let radius = (max_weight / lambda).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();

    // The iterate is w = scale · v so the per-step shrink is O(1). The epoch
    // average Σ_t scale_t v_t is S·v − u, with S the running sum of scales and
    // u accumulating each sparse update Δ_t weighted by S before step t.
    let mut v = vec![0.0; dim];
    let mut scale = 1.0;
    let mut sq_norm = 0.0; // ‖v‖²
    let mut bias = 0.0;
    let mut t: u64 = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut u = vec![0.0; dim];
    let mut flushed = vec![0.0; dim];
    let mut avg_weights = vec![0.0; dim];
    let mut avg_bias = 0.0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        u.iter_mut().for_each(|x| *x = 0.0);
        flushed.iter_mut().for_each(|x| *x = 0.0);
        let mut scale_sum = 0.0;
        let mut bias_sum = 0.0;

        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let (x, y) = (&xs[i], ys[i]);
            let margin = y.sign() * (scale * x.dot(&v) + bias);

            if t == 1 {
                v.iter_mut().for_each(|w| *w = 0.0);
                scale = 1.0;
                sq_norm = 0.0;
            } else {
                scale *= 1.0 - 1.0 / t as f64;
            }

            if margin < 1.0 {
                let coef = eta * cfg.class_weights.get(y) * y.sign();
                let step = coef / scale;
                for &(c, xv) in x.entries() {
                    let delta = step * xv;
                    let old = v[c];
                    v[c] += delta;
                    sq_norm += v[c] * v[c] - old * old;
                    u[c] += scale_sum * delta;
                }
                bias += coef;
            }

            let norm = scale * sq_norm.max(0.0).sqrt();
            if norm > radius {
                scale *= radius / norm;
            }
            scale_sum += scale;
            bias_sum += bias;

            if scale < 1e-9 {
                for c in 0..dim {
                    flushed[c] += scale_sum * v[c] - u[c];
                    v[c] *= scale;
                    u[c] = 0.0;
                }
                sq_norm = v.iter().map(|w| w * w).sum();
                scale = 1.0;
                scale_sum = 0.0;
            }
        }

        let m = n as f64;
        for c in 0..dim {
            avg_weights[c] = (flushed[c] + scale_sum * v[c] - u[c]) / m;
        }
        avg_bias = bias_sum / m;
        history.push(hinge_objective(
            &avg_weights,
            avg_bias,
            xs,
            ys,
            &cfg.class_weights,
            lambda,
        ));
    }

    let weights = avg_weights;
    let bias = avg_bias;
    let convergence_warning = convergence_check(&history);
    if let Some(w) = &convergence_warning {
        log::warn!("svm C={}: {w}", cfg.c);
    }
    Ok(LinearModel {
        weights,
        bias,
        config: cfg.clone(),
        vocab_fingerprint: None,
        objective_history: history,
        convergence_warning,
    })
}

/// The objective should not rise by more than 1e-3 between consecutive
/// epochs among the last five.
fn convergence_check(history: &[f64]) -> Option<String> {
    let tail = &history[history.len().saturating_sub(5)..];
    for pair in tail.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next > prev + 1e-3 {
            return Some(format!(
                "objective rose from {prev:.6} to {next:.6} in the final epochs"
            ));
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_c: f64,
    /// `(C, dev macro-F1)` in ascending C order.
    pub table: Vec<(f64, f64)>,
    pub best_model: LinearModel,
}

/// Trains one model per C and keeps the best dev macro-F1; ties go to the
/// smaller C.
pub fn grid_search_c(
    train: (&[SparseVector], &[Label]),
    dev: (&[SparseVector], &[Label]),
    dim: usize,
    grid: &[f64],
    base: &LinearConfig,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty C grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, LinearModel)> = None;
    for c in grid {
        let cfg = LinearConfig { c, ..base.clone() };
        let model = train_svm(train.0, train.1, dim, &cfg)?;
        let pred = model.predict_all(dev.0)?;
        let f1 = eval::macro_f1(dev.1, &pred)?;
        log::info!("C={c}: dev macro-F1 {:.4}", f1);
        table.push((c, f1));
        if best.as_ref().is_none_or(|(_, bf, _)| f1 > *bf) {
            best = Some((c, f1, model));
        }
    }
    let (best_c, _, best_model) = best.expect("grid is non-empty");
    Ok(GridSearchResult {
        best_c,
        table,
        best_model,
    })
}

const MODEL_MAGIC: &str = "offlang-linear";
const MODEL_VERSION: u32 = 1;

impl LinearModel {
    /// Text format, one record per line, tab separated:
    ///
    /// ```text
    /// offlang-linear  1
    /// vocab           <sha256 hex or ->
    /// config          <json>
    /// dim             <d>
    /// bias            <f64>
    /// objective       <comma separated per-epoch values>
    /// w               <column>  <weight>      (non-zero weights only)
    /// ```
    ///
    /// Floats use Rust's shortest round-trip formatting, so a reload is exact.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<linear model>", e);
        let config = serde_json::to_string(&self.config)?;
        let objective: Vec<String> = self.objective_history.iter().map(|v| format!("{v:e}")).collect();
        (|| -> std::io::Result<()> {
            writeln!(out, "{MODEL_MAGIC}\t{MODEL_VERSION}")?;
            writeln!(out, "vocab\t{}", self.vocab_fingerprint.as_deref().unwrap_or("-"))?;
            writeln!(out, "config\t{config}")?;
            writeln!(out, "dim\t{}", self.weights.len())?;
            writeln!(out, "bias\t{:e}", self.bias)?;
            writeln!(out, "objective\t{}", objective.join(","))?;
            for (c, w) in self.weights.iter().enumerate() {
                if *w != 0.0 {
                    writeln!(out, "w\t{c}\t{w:e}")?;
                }
            }
            Ok(())
        })()
        .map_err(io)
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let ctx = "linear model";
        let bad = |what: &str| Error::format(ctx, what.to_string());
        let mut lines = input.lines();
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .map_err(|e| Error::format(ctx, e.to_string()))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix('\t'))
                .map(str::to_string)
                .ok_or_else(|| Error::format(ctx, format!("expected {name:?} line, got {line:?}")))
        };
        let version = field(MODEL_MAGIC)?;
        if version != MODEL_VERSION.to_string() {
            return Err(bad("unsupported version"));
        }
        let vocab = field("vocab")?;
        let config: LinearConfig = serde_json::from_str(&field("config")?)?;
        let dim: usize = field("dim")?.parse().map_err(|_| bad("bad dim"))?;
        let bias: f64 = field("bias")?.parse().map_err(|_| bad("bad bias"))?;
        let objective = field("objective")?;
        let objective_history = if objective.is_empty() {
            Vec::new()
        } else {
            objective
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad("bad objective value")))
                .collect::<Result<Vec<_>>>()?
        };
        let mut weights = vec![0.0; dim];
        for line in lines {
            let line = line.map_err(|e| Error::format(ctx, e.to_string()))?;
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("w"), Some(c), Some(w)) => {
                    let c: usize = c.parse().map_err(|_| bad("bad column"))?;
                    if c >= dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: c + 1,
                        });
                    }
                    weights[c] = w.parse().map_err(|_| bad("bad weight"))?;
                }
                _ => return Err(Error::format(ctx, format!("bad weight line {line:?}"))),
            }
        }
        let convergence_warning = convergence_check(&objective_history);
        Ok(LinearModel {
            weights,
            bias,
            config,
            vocab_fingerprint: (vocab != "-").then_some(vocab),
            objective_history,
            convergence_warning,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}

impl fmt::Display for LinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nnz = self.weights.iter().filter(|w| **w != 0.0).count();
        write!(
            f,
            "linear SVM (C={}, dim={}, nnz={}, bias={:.4})",
            self.config.c,
            self.dim(),
            nnz,
            self.bias
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sv(pairs: &[(usize, f64)]) -> SparseVector {
        SparseVector::from_pairs(pairs.to_vec())
    }

    fn toy_problem(seed: u64, n: usize, dim: usize) -> (Vec<SparseVector>, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = if i % 3 == 0 { Label::Off } else { Label::Not };
            let mut pairs = vec![(if y == Label::Off { 0 } else { 1 }, 1.0)];
            for _ in 0..3 {
                pairs.push((rng.random_range(2..dim), rng.random_range(0.0..1.0)));
            }
            xs.push(sv(&pairs).normalized());
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn separable_pair() {
        let xs = vec![sv(&[(0, 1.0)]), sv(&[(0, -1.0)])];
        let ys = vec![Label::Off, Label::Not];
        let m = train_svm(&xs, &ys, 1, &LinearConfig::default()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (label, score) = m.predict(x).unwrap();
            assert_eq!(label, *y);
            assert!(y.sign() * score >= 0.0);
        }
    }

    #[test]
    fn single_class_and_dimension_errors() {
        let xs = vec![sv(&[(0, 1.0)]), sv(&[(0, 0.5)])];
        assert!(matches!(
            train_svm(&xs, &[Label::Off, Label::Off], 1, &LinearConfig::default()),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            train_svm(&xs, &[Label::Off, Label::Not], 0, &LinearConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = LinearConfig {
            c: 0.0,
            ..LinearConfig::default()
        };
        assert!(train_svm(&xs, &[Label::Off, Label::Not], 1, &bad).is_err());
    }

    #[test]
    fn prediction_rules() {
        let zero = LinearModel {
            weights: vec![0.0; 3],
            bias: 0.0,
            config: LinearConfig::default(),
            vocab_fingerprint: None,
            objective_history: vec![],
            convergence_warning: None,
        };
        assert_eq!(zero.predict(&sv(&[(1, 0.3)])).unwrap(), (Label::Not, 0.0));

        let m = LinearModel {
            weights: vec![1.0, 0.0, 0.0],
            ..zero.clone()
        };
        assert_eq!(m.predict(&sv(&[(0, 0.5)])).unwrap(), (Label::Off, 0.5));

        let m = LinearModel {
            bias: -0.25,
            ..zero.clone()
        };
        assert_eq!(m.predict(&SparseVector::default()).unwrap(), (Label::Not, -0.25));
        assert!(matches!(
            m.predict(&sv(&[(7, 1.0)])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_training() {
        let (xs, ys) = toy_problem(3, 60, 20);
        let cfg = LinearConfig {
            class_weights: ClassWeights::balanced_for(&ys).unwrap(),
            ..LinearConfig::default()
        };
        let a = train_svm(&xs, &ys, 20, &cfg).unwrap();
        let b = train_svm(&xs, &ys, 20, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a
            .weights
            .iter()
            .zip(&b.weights)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn learns_toy_problem_and_converges() {
        let (xs, ys) = toy_problem(5, 90, 30);
        let m = train_svm(&xs, &ys, 30, &LinearConfig::default()).unwrap();
        let pred = m.predict_all(&xs).unwrap();
        assert_eq!(pred, ys);
        assert_eq!(m.objective_history.len(), 20);
        assert!(m.convergence_warning.is_none(), "{:?}", m.objective_history);
    }

    #[test]
    fn uniform_weight_scaling_equals_scaled_c() {
        let (xs, ys) = toy_problem(11, 40, 12);
        let k = 2.5;
        let weighted = LinearConfig {
            c: 0.4,
            class_weights: ClassWeights::new(k, k).unwrap(),
            ..LinearConfig::default()
        };
        let plain = LinearConfig {
            c: 0.4 * k,
            ..LinearConfig::default()
        };
        let a = train_svm(&xs, &ys, 12, &weighted).unwrap();
        let b = train_svm(&xs, &ys, 12, &plain).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
        assert!((a.bias - b.bias).abs() <= 1e-6 * a.bias.abs().max(1.0));
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 6;
        let (xs, ys) = toy_problem(9, 12, dim);
        let cw = ClassWeights::new(0.8, 1.7).unwrap();
        let lambda = 0.05;
        let h = 1e-6;
        for _ in 0..20 {
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            // skip points within h of a hinge kink
            let near_kink = xs.iter().zip(&ys).any(|(x, y)| {
                let m = y.sign() * (x.dot(&w) + b);
                (1.0 - m).abs() < 1e-4
            });
            if near_kink {
                continue;
            }
            let (gw, gb) = hinge_subgradient(&w, b, &xs, &ys, &cw, lambda);
            let f = |w: &[f64], b: f64| hinge_objective(w, b, &xs, &ys, &cw, lambda);
            for j in 0..dim {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (f(&wp, b) - f(&wm, b)) / (2.0 * h);
                let rel = (fd - gw[j]).abs() / gw[j].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "w[{j}]: analytic {} vs fd {fd}", gw[j]);
            }
            let fd = (f(&w, b + h) - f(&w, b - h)) / (2.0 * h);
            let rel = (fd - gb).abs() / gb.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "bias: analytic {gb} vs fd {fd}");
        }
    }

    #[test]
    fn grid_search_prefers_smaller_c_on_ties() {
        let (xs, ys) = toy_problem(21, 30, 10);
        let r = grid_search_c((&xs, &ys), (&xs, &ys), 10, &[10.0, 1.0], &LinearConfig::default()).unwrap();
        assert_eq!(r.table.len(), 2);
        assert_eq!(r.table[0].0, 1.0);
        if r.table[0].1 == r.table[1].1 {
            assert_eq!(r.best_c, 1.0);
        }
        let r = grid_search_c((&xs, &ys), (&xs, &ys), 10, &[0.1], &LinearConfig::default()).unwrap();
        assert_eq!(r.best_c, 0.1);
        assert!(grid_search_c((&xs, &ys), (&xs, &ys), 10, &[], &LinearConfig::default()).is_err());
    }

    #[test]
    fn model_file_roundtrip() {
        let (xs, ys) = toy_problem(2, 30, 10);
        let m = train_svm(&xs, &ys, 10, &LinearConfig::default())
            .unwrap()
            .with_vocab_fingerprint("abc123");
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = LinearModel::read(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn prediction_ignores_pair_order(mut pairs in proptest::collection::vec((0usize..8, -1.0f64..1.0), 0..8)) {
            let m = LinearModel {
                weights: (0..8).map(|i| i as f64 * 0.25 - 1.0).collect(),
                bias: 0.1,
                config: LinearConfig::default(),
                vocab_fingerprint: None,
                objective_history: vec![],
                convergence_warning: None,
            };
            pairs.sort_by_key(|p| p.0);
            pairs.dedup_by_key(|p| p.0);
            let a = m.predict(&SparseVector::from_pairs(pairs.clone())).unwrap();
            pairs.reverse();
            let b = m.predict(&SparseVector::from_pairs(pairs)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
