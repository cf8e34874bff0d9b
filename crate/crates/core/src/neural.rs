//! LSTM and BiLSTM classifiers over frozen word embeddings.
//!
//! Everything is plain `f64` math on row-major buffers. Gates are stored in
//! the order input, forget, candidate, output. A network is a stack of
//! (Bi)LSTM layers whose final hidden states are mean-pooled and fed to a
//! single sigmoid unit.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::error::{Error, Result};
use crate::features::tokenize_words;
use crate::losses::{bce, bce_grad, focal, focal_grad, sigmoid, ClassWeights, FocalParams};

const CHECKPOINT_FORMAT: &str = "offlang-neural";
const CHECKPOINT_VERSION: u32 = 1;

/// Batches are split into this many shards for gradient accumulation. The
/// count is fixed so the summation order, and therefore every bit of the
/// result, does not depend on the machine.
const SHARDS: usize = 4;

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    /// Unknown tokens map to the zero vector.
    Zero,
}

/// Frozen token vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    zero: Vec<f64>,
    oov: OovPolicy,
    skipped: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
            zero: vec![0.0; dim],
            oov: OovPolicy::Zero,
            skipped: 0,
        }
    }

    /// Adds a vector; the first vector for a token wins.
    pub fn insert(&mut self, token: impl Into<String>, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let token = token.into();
        if self.index.contains_key(&token) {
            return Ok(());
        }
        self.index.insert(token, self.data.len() / self.dim);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov
    }

    /// Lines dropped while loading because of a wrong field count or an
    /// unparsable value.
    pub fn skipped_lines(&self) -> usize {
        self.skipped
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    fn row_id(&self, token: &str) -> Option<usize> {
        if let Some(&i) = self.index.get(token) {
            return Some(i);
        }
        let trimmed = token.trim_matches(|c: char| c.is_ascii_punctuation());
        if trimmed.is_empty() || trimmed == token {
            return None;
        }
        self.index.get(trimmed).copied()
    }

    /// Looks up `token`, falling back to the token with surrounding ASCII
    /// punctuation removed. `None` means out of vocabulary.
    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.row_id(token)
            .map(|i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Token row ids for `text`, truncated to `max_len`. Empty text becomes a
    /// single unknown token.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<Option<usize>> {
        let mut ids: Vec<_> = tokenize_words(text)
            .into_iter()
            .take(max_len.max(1))
            .map(|t| self.row_id(t))
            .collect();
        if ids.is_empty() {
            ids.push(None);
        }
        ids
    }

    pub fn rows(&self, ids: &[Option<usize>]) -> Vec<&[f64]> {
        ids.iter()
            .map(|id| match id {
                Some(i) => &self.data[i * self.dim..(i + 1) * self.dim],
                None => &self.zero[..],
            })
            .collect()
    }

    /// Embedding sequence for `text`.
    pub fn embed(&self, text: &str, max_len: usize) -> Vec<&[f64]> {
        let ids = self.encode(text, max_len);
        self.rows(&ids)
    }
}

/// Reads a GloVe-style text file: a token followed by `dim` reals per line.
pub fn load_embeddings(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable> {
    load_embeddings_filtered(path, dim, None)
}

/// Like [`load_embeddings`] but only keeps tokens in `keep`. Lines for other
/// tokens still count as usable.
pub fn load_embeddings_filtered(
    path: impl AsRef<Path>,
    dim: usize,
    keep: Option<&HashSet<String>>,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dim must be at least 1".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::new(dim);
    let mut usable = 0usize;
    let mut vector = Vec::with_capacity(dim);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        vector.clear();
        let mut ok = true;
        for f in fields {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => vector.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || vector.len() != dim {
            table.skipped += 1;
            continue;
        }
        usable += 1;
        if keep.is_none_or(|k| k.contains(token)) {
            table.insert(token, &vector)?;
        }
    }
    if table.skipped > 0 {
        log::warn!(
            "{}: skipped {} malformed embedding lines",
            path.display(),
            table.skipped
        );
    }
    if usable == 0 {
        return Err(Error::NoEmbeddings {
            path: path.to_path_buf(),
            skipped: table.skipped,
        });
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralConfig {
    pub bidirectional: bool,
    pub layers: usize,
    pub units: usize,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clipnorm: f64,
    pub sigmoid_threshold: f64,
    pub seed: u64,
    pub max_seq_len: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            bidirectional: false,
            layers: 3,
            units: 100,
            dropout_rate: 0.2,
            l2_lambda: 0.01,
            learning_rate: 5e-4,
            batch_size: 32,
            max_epochs: 50,
            clipnorm: 1.0,
            sigmoid_threshold: 0.5,
            seed: 1234,
            max_seq_len: 104,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.units == 0 || self.layers == 0 {
            return bad("units and layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if !(self.sigmoid_threshold > 0.0 && self.sigmoid_threshold < 1.0) {
            return bad(format!(
                "sigmoid_threshold must be in (0, 1), got {}",
                self.sigmoid_threshold
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad(format!("l2_lambda must be non-negative, got {}", self.l2_lambda));
        }
        if self.clipnorm.is_nan() || self.clipnorm <= 0.0 {
            return bad(format!("clipnorm must be positive, got {}", self.clipnorm));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_seq_len == 0 {
            return bad("batch_size, max_epochs and max_seq_len must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CallbackConfig {
    pub reduce_on_plateau: bool,
    pub plateau_factor: f64,
    pub plateau_min_lr: f64,
    pub plateau_patience: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub restore_best: bool,
}

impl Default for CallbackConfig {
    fn default() -> Self {
        CallbackConfig {
            reduce_on_plateau: true,
            plateau_factor: 0.1,
            plateau_min_lr: 1e-6,
            plateau_patience: 5,
            early_stopping: true,
            early_stop_patience: 7,
            restore_best: true,
        }
    }
}

impl CallbackConfig {
    /// Both callbacks off; the full epoch budget always runs.
    pub fn disabled() -> Self {
        CallbackConfig {
            reduce_on_plateau: false,
            early_stopping: false,
            restore_best: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plateau_factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_min_lr.is_nan() || self.plateau_min_lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "plateau_min_lr must be positive, got {}",
                self.plateau_min_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
    Focal(FocalParams),
}

impl LossKind {
    pub fn value(&self, logit: f64, label: Label, weight: f64) -> f64 {
        let p = sigmoid(logit);
        match self {
            LossKind::Bce => bce(p, label.target(), weight),
            LossKind::Focal(fp) => weight * focal(p, label.target(), *fp),
        }
    }

    /// Derivative with respect to the logit.
    pub fn grad(&self, logit: f64, label: Label, weight: f64) -> f64 {
        match self {
            LossKind::Bce => bce_grad(logit, label.target(), weight),
            LossKind::Focal(fp) => weight * focal_grad(logit, label.target(), *fp),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Bce => f.write_str("bce"),
            LossKind::Focal(fp) => write!(f, "focal(alpha={}, gamma={})", fp.alpha, fp.gamma),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Matrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    fn gemv_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += self^T * y`
    fn gemv_t_add(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
    }

    /// `self += y x^T`
    fn outer_add(&mut self, y: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (w, &xc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += yr * xc;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One LSTM direction: input weights `w` (4H x I), recurrent weights `u`
/// (4H x H) and bias `b` (4H).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, units: usize) -> Self {
        LstmParams {
            w: Matrix::zeros(4 * units, input),
            u: Matrix::zeros(4 * units, units),
            b: vec![0.0; 4 * units],
        }
    }

    /// Glorot-uniform weights, zero biases except a forget-gate bias of 1.
    pub fn init(input: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Matrix::glorot(4 * units, input, rng);
        let u = Matrix::glorot(4 * units, units, rng);
        let mut b = vec![0.0; 4 * units];
        b[units..2 * units].fill(1.0);
        LstmParams { w, u, b }
    }

    pub fn units(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub forward: LstmParams,
    pub backward: Option<LstmParams>,
}

impl LayerParams {
    pub fn output_dim(&self) -> usize {
        self.forward.units() * if self.backward.is_some() { 2 } else { 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl NetworkParams {
    /// Fresh parameters. Layers are initialized bottom-up, forward direction
    /// before backward, then the output layer.
    pub fn init(
        input_dim: usize,
        units: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut width = input_dim;
        for _ in 0..layers {
            let forward = LstmParams::init(width, units, rng);
            let backward = bidirectional.then(|| LstmParams::init(width, units, rng));
            let layer = LayerParams { forward, backward };
            width = layer.output_dim();
            out.push(layer);
        }
        let limit = (6.0 / (width + 1) as f64).sqrt();
        let out_w = (0..width).map(|_| rng.random_range(-limit..limit)).collect();
        NetworkParams {
            layers: out,
            out_w,
            out_b: vec![0.0],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t, _| t.fill(0.0));
        z
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out_w.len()
    }

    fn for_each(&self, mut f: impl FnMut(&[f64], bool)) {
        for l in &self.layers {
            for p in std::iter::once(&l.forward).chain(l.backward.as_ref()) {
                f(&p.w.data, true);
                f(&p.u.data, true);
                f(&p.b, false);
            }
        }
        f(&self.out_w, true);
        f(&self.out_b, false);
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64], bool)) {
        for l in &mut self.layers {
            for p in std::iter::once(&mut l.forward).chain(l.backward.as_mut()) {
                f(&mut p.w.data, true);
                f(&mut p.u.data, true);
                f(&mut p.b, false);
            }
        }
        f(&mut self.out_w, true);
        f(&mut self.out_b, false);
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        self.for_each_tensor_ref(&mut v);
        v
    }

    fn for_each_tensor_ref<'a>(&'a self, v: &mut Vec<&'a [f64]>) {
        for l in &self.layers {
            for p in std::iter::once(&l.forward).chain(l.backward.as_ref()) {
                v.push(&p.w.data);
                v.push(&p.u.data);
                v.push(&p.b);
            }
        }
        v.push(&self.out_w);
        v.push(&self.out_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|t, _| n += t.len());
        n
    }

    /// All parameters in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.for_each(|t, _| v.extend_from_slice(t));
        v
    }

    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: values.len(),
            });
        }
        let mut off = 0;
        self.for_each_mut(|t, _| {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        });
        Ok(())
    }

    /// Sum of squares over weight matrices (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|t, reg| {
            if reg {
                s += t.iter().map(|x| x * x).sum::<f64>();
            }
        });
        s
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|t, _| s += t.iter().map(|x| x * x).sum::<f64>());
        s.sqrt()
    }

    fn add_scaled(&mut self, other: &NetworkParams, k: f64) {
        let src = other.tensors();
        let mut i = 0;
        self.for_each_mut(|t, _| {
            for (a, b) in t.iter_mut().zip(src[i]) {
                *a += k * b;
            }
            i += 1;
        });
    }

    fn scale(&mut self, k: f64) {
        self.for_each_mut(|t, _| t.iter_mut().for_each(|x| *x *= k));
    }

    /// `grad += 2 lambda W` on weight matrices.
    fn add_l2_grad(&mut self, params: &NetworkParams, lambda: f64) {
        let src = params.tensors();
        let mut i = 0;
        self.for_each_mut(|t, reg| {
            if reg {
                for (g, w) in t.iter_mut().zip(src[i]) {
                    *g += 2.0 * lambda * w;
                }
            }
            i += 1;
        });
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|t, _| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Rescales `grads` so its global L2 norm is at most `clipnorm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut NetworkParams, clipnorm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clipnorm {
        grads.scale(clipnorm / norm);
    }
    norm
}

// ---------------------------------------------------------------------------
// Forward and backward passes

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

struct Step {
    x: Vec<f64>,
    /// Gate activations i, f, g, o.
    a: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Steps in processing order.
struct CellTrace {
    steps: Vec<Step>,
}

fn cell_forward(p: &LstmParams, xs: &[&[f64]]) -> CellTrace {
    let h_n = p.units();
    let mut steps: Vec<Step> = Vec::with_capacity(xs.len());
    let zeros = vec![0.0; h_n];
    for x in xs {
        let (h_prev, c_prev) = match steps.last() {
            Some(s) => (&s.h[..], &s.c[..]),
            None => (&zeros[..], &zeros[..]),
        };
        let mut a = p.b.clone();
        p.w.gemv_add(x, &mut a);
        p.u.gemv_add(h_prev, &mut a);
        for (k, v) in a.iter_mut().enumerate() {
            *v = if (2 * h_n..3 * h_n).contains(&k) {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
        let mut c = vec![0.0; h_n];
        let mut tanh_c = vec![0.0; h_n];
        let mut h = vec![0.0; h_n];
        for j in 0..h_n {
            let (i, f, g, o) = (a[j], a[h_n + j], a[2 * h_n + j], a[3 * h_n + j]);
            c[j] = f * c_prev[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
        steps.push(Step {
            x: x.to_vec(),
            a,
            c,
            tanh_c,
            h,
        });
    }
    CellTrace { steps }
}

/// Backpropagates `dhs` (one per step, processing order) through the cell,
/// accumulating into `grad`. Returns input gradients in processing order.
fn cell_backward(
    p: &LstmParams,
    trace: &CellTrace,
    dhs: &[Vec<f64>],
    grad: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let h_n = p.units();
    let t_n = trace.steps.len();
    let zeros = vec![0.0; h_n];
    let mut dxs = vec![Vec::new(); t_n];
    let mut dh_next = vec![0.0; h_n];
    let mut dc_next = vec![0.0; h_n];
    let mut da = vec![0.0; 4 * h_n];
    for t in (0..t_n).rev() {
        let s = &trace.steps[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&trace.steps[t - 1].h[..], &trace.steps[t - 1].c[..])
        };
        for j in 0..h_n {
            let (i, f, g, o) = (s.a[j], s.a[h_n + j], s.a[2 * h_n + j], s.a[3 * h_n + j]);
            let dh = dhs[t][j] + dh_next[j];
            let d_o = dh * s.tanh_c[j];
            let dc = dh * o * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
            da[j] = dc * g * i * (1.0 - i);
            da[h_n + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * h_n + j] = dc * i * (1.0 - g * g);
            da[3 * h_n + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        for (gb, d) in grad.b.iter_mut().zip(&da) {
            *gb += d;
        }
        grad.w.outer_add(&da, &s.x);
        grad.u.outer_add(&da, h_prev);
        let mut dx = vec![0.0; p.input_dim()];
        p.w.gemv_t_add(&da, &mut dx);
        dxs[t] = dx;
        dh_next.fill(0.0);
        p.u.gemv_t_add(&da, &mut dh_next);
    }
    dxs
}

fn check_seq(seq: &[&[f64]], input: usize) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidConfig("sequence must not be empty".into()));
    }
    if let Some(x) = seq.iter().find(|x| x.len() != input) {
        return Err(Error::DimensionMismatch {
            expected: input,
            got: x.len(),
        });
    }
    Ok(())
}

/// Hidden states of one LSTM direction, aligned with the input positions.
/// `Backward` runs over the reversed sequence, so its state at position `t`
/// has seen `seq[t..]`.
pub fn lstm_forward(seq: &[&[f64]], params: &LstmParams, direction: Direction) -> Result<Vec<Vec<f64>>> {
    check_seq(seq, params.input_dim())?;
    let hs = match direction {
        Direction::Forward => cell_forward(params, seq).steps.into_iter().map(|s| s.h).collect(),
        Direction::Backward => {
            let rev: Vec<&[f64]> = seq.iter().rev().copied().collect();
            let mut hs: Vec<Vec<f64>> = cell_forward(params, &rev)
                .steps
                .into_iter()
                .map(|s| s.h)
                .collect();
            hs.reverse();
            hs
        }
    };
    Ok(hs)
}

/// Output of one (Bi)LSTM layer: forward states, then backward states when
/// present, concatenated per position.
pub fn layer_forward(seq: &[&[f64]], layer: &LayerParams) -> Result<Vec<Vec<f64>>> {
    check_seq(seq, layer.forward.input_dim())?;
    Ok(run_layer(seq, layer).0)
}

struct LayerTrace {
    fwd: CellTrace,
    bwd: Option<CellTrace>,
    /// Dropout mask applied to this layer's outputs.
    mask: Option<Vec<Vec<f64>>>,
}

fn run_layer(seq: &[&[f64]], layer: &LayerParams) -> (Vec<Vec<f64>>, CellTrace, Option<CellTrace>) {
    let fwd = cell_forward(&layer.forward, seq);
    let bwd = layer.backward.as_ref().map(|p| {
        let rev: Vec<&[f64]> = seq.iter().rev().copied().collect();
        cell_forward(p, &rev)
    });
    let t_n = seq.len();
    let out = (0..t_n)
        .map(|t| {
            let mut o = fwd.steps[t].h.clone();
            if let Some(b) = &bwd {
                o.extend_from_slice(&b.steps[t_n - 1 - t].h);
            }
            o
        })
        .collect();
    (out, fwd, bwd)
}

struct NetTrace {
    layers: Vec<LayerTrace>,
    len: usize,
    pooled: Vec<f64>,
    pooled_mask: Option<Vec<f64>>,
    logit: f64,
}

fn dropout_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Runs the network. With `dropout = Some((rate, rng))` masks are sampled,
/// otherwise the pass is deterministic.
fn net_forward(
    params: &NetworkParams,
    seq: &[&[f64]],
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> NetTrace {
    let n_layers = params.layers.len();
    let mut traces = Vec::with_capacity(n_layers);
    let mut current: Vec<Vec<f64>> = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let (mut out, fwd, bwd) = if l == 0 {
            run_layer(seq, layer)
        } else {
            let refs: Vec<&[f64]> = current.iter().map(|v| &v[..]).collect();
            run_layer(&refs, layer)
        };
        let mut mask = None;
        if l + 1 < n_layers {
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    let m: Vec<Vec<f64>> = out.iter().map(|o| dropout_mask(o.len(), *rate, rng)).collect();
                    for (o, mk) in out.iter_mut().zip(&m) {
                        o.iter_mut().zip(mk).for_each(|(v, k)| *v *= k);
                    }
                    mask = Some(m);
                }
            }
        }
        traces.push(LayerTrace { fwd, bwd, mask });
        current = out;
    }
    let len = current.len();
    let width = params.output_dim();
    let mut pooled = vec![0.0; width];
    for o in &current {
        pooled.iter_mut().zip(o).for_each(|(p, v)| *p += v);
    }
    pooled.iter_mut().for_each(|p| *p /= len as f64);
    let mut pooled_mask = None;
    let mut logit = params.out_b[0];
    match dropout.as_mut() {
        Some((rate, rng)) if *rate > 0.0 => {
            let m = dropout_mask(width, *rate, rng);
            logit += pooled
                .iter()
                .zip(&m)
                .zip(&params.out_w)
                .map(|((p, k), w)| p * k * w)
                .sum::<f64>();
            pooled_mask = Some(m);
        }
        _ => logit += dot(&pooled, &params.out_w),
    }
    NetTrace {
        layers: traces,
        len,
        pooled,
        pooled_mask,
        logit,
    }
}

/// Accumulates the parameter gradient of `dlogit * logit` into `grad`.
fn net_backward(params: &NetworkParams, trace: &NetTrace, dlogit: f64, grad: &mut NetworkParams) {
    let width = params.output_dim();
    let mut dpooled = vec![0.0; width];
    for j in 0..width {
        let k = trace.pooled_mask.as_ref().map_or(1.0, |m| m[j]);
        grad.out_w[j] += dlogit * trace.pooled[j] * k;
        dpooled[j] = dlogit * params.out_w[j] * k;
    }
    grad.out_b[0] += dlogit;
    let t_n = trace.len;
    let share: Vec<f64> = dpooled.iter().map(|d| d / t_n as f64).collect();
    let mut d_out: Vec<Vec<f64>> = vec![share; t_n];
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lt = &trace.layers[l];
        if let Some(m) = &lt.mask {
            for (d, mk) in d_out.iter_mut().zip(m) {
                d.iter_mut().zip(mk).for_each(|(v, k)| *v *= k);
            }
        }
        let h_n = layer.forward.units();
        let glayer = &mut grad.layers[l];
        let dh_f: Vec<Vec<f64>> = d_out.iter().map(|d| d[..h_n].to_vec()).collect();
        let mut d_in = cell_backward(&layer.forward, &lt.fwd, &dh_f, &mut glayer.forward);
        if let (Some(bp), Some(bt), Some(bg)) = (&layer.backward, &lt.bwd, glayer.backward.as_mut()) {
            let dh_b: Vec<Vec<f64>> = (0..t_n).map(|s| d_out[t_n - 1 - s][h_n..].to_vec()).collect();
            let d_rev = cell_backward(bp, bt, &dh_b, bg);
            for (t, d) in d_in.iter_mut().enumerate() {
                d.iter_mut().zip(&d_rev[t_n - 1 - t]).for_each(|(a, b)| *a += b);
            }
        }
        if l == 0 {
            break;
        }
        d_out = d_in;
    }
}

/// Loss of a single sequence with dropout off: the weighted data loss plus
/// `l2 * ||W||^2`.
pub fn sequence_loss(
    params: &NetworkParams,
    seq: &[&[f64]],
    label: Label,
    loss: LossKind,
    weight: f64,
    l2: f64,
) -> Result<f64> {
    check_seq(seq, params.input_dim())?;
    let trace = net_forward(params, seq, None);
    Ok(loss.value(trace.logit, label, weight) + l2 * params.weight_sq_norm())
}

/// [`sequence_loss`] and its gradient with respect to every parameter.
pub fn sequence_loss_grad(
    params: &NetworkParams,
    seq: &[&[f64]],
    label: Label,
    loss: LossKind,
    weight: f64,
    l2: f64,
) -> Result<(f64, NetworkParams)> {
    check_seq(seq, params.input_dim())?;
    let trace = net_forward(params, seq, None);
    let mut grad = params.zeros_like();
    net_backward(params, &trace, loss.grad(trace.logit, label, weight), &mut grad);
    grad.add_l2_grad(params, l2);
    Ok((
        loss.value(trace.logit, label, weight) + l2 * params.weight_sq_norm(),
        grad,
    ))
}

/// Logit of a sequence with dropout off.
pub fn network_logit(params: &NetworkParams, seq: &[&[f64]]) -> Result<f64> {
    check_seq(seq, params.input_dim())?;
    Ok(net_forward(params, seq, None).logit)
}

// ---------------------------------------------------------------------------
// Optimizer and callbacks

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let gs = grads.tensors();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        let mut ti = 0;
        params.for_each_mut(|p, _| {
            let g = gs[ti];
            for k in 0..p.len() {
                let i = off + k;
                m[i] = b1 * m[i] + (1.0 - b1) * g[k];
                v[i] = b2 * v[i] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            off += p.len();
            ti += 1;
        });
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// an improvement of at least `min_delta`.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    wait: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, min_lr: f64, patience: usize) -> Self {
        ReduceLrOnPlateau {
            factor,
            min_lr,
            patience,
            min_delta: 1e-4,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns the learning rate for the next epoch.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best - self.min_delta {
            self.best = metric;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience && lr > self.min_lr {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops once `patience` epochs pass without the metric improving on the
/// best value seen.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn observe(&mut self, metric: f64, epoch: usize) -> StopDecision {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopDecision {
                improved: true,
                stop: false,
            };
        }
        self.wait += 1;
        StopDecision {
            improved: false,
            stop: self.wait >= self.patience,
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest dev loss, 0-based.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub restored_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub config: NeuralConfig,
    pub callbacks: CallbackConfig,
    pub loss: LossKind,
    pub class_weights: ClassWeights,
    pub params: NetworkParams,
    pub history: TrainingHistory,
}

struct Encoded {
    ids: Vec<Vec<Option<usize>>>,
    labels: Vec<Label>,
}

fn encode_dataset(d: &Dataset, emb: &EmbeddingTable, max_len: usize) -> Result<Encoded> {
    let labels = d.labels()?;
    let ids = d.iter().map(|i| emb.encode(&i.text, max_len)).collect();
    Ok(Encoded { ids, labels })
}

/// Splits `0..n` into at most [`SHARDS`] contiguous ranges.
fn shard_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let per = n.div_ceil(SHARDS).max(1);
    (0..n).step_by(per).map(|s| s..(s + per).min(n)).collect()
}

fn dev_loss(params: &NetworkParams, emb: &EmbeddingTable, dev: &Encoded, loss: LossKind, l2: f64) -> f64 {
    let n = dev.ids.len();
    let sums: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = shard_ranges(n)
            .into_iter()
            .map(|r| {
                s.spawn(move || {
                    r.map(|i| {
                        let rows = emb.rows(&dev.ids[i]);
                        loss.value(net_forward(params, &rows, None).logit, dev.labels[i], 1.0)
                    })
                    .sum::<f64>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("dev loss worker panicked"))
            .collect()
    });
    sums.iter().sum::<f64>() / n as f64 + l2 * params.weight_sq_norm()
}

/// Trains a (Bi)LSTM classifier. Dev loss drives the callbacks; it is the
/// unweighted mean data loss plus the L2 term.
pub fn train_neural(
    train: &Dataset,
    dev: &Dataset,
    emb: &EmbeddingTable,
    cfg: &NeuralConfig,
    cb: &CallbackConfig,
    loss: LossKind,
    weights: ClassWeights,
) -> Result<NeuralModel> {
    cfg.validate()?;
    cb.validate()?;
    if let LossKind::Focal(fp) = loss {
        fp.validate()?;
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dev.is_empty() {
        return Err(Error::InvalidSplit("dev set is empty".into()));
    }
    let tr = encode_dataset(train, emb, cfg.max_seq_len)?;
    let dv = encode_dataset(dev, emb, cfg.max_seq_len)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetworkParams::init(emb.dim(), cfg.units, cfg.layers, cfg.bidirectional, &mut init_rng);
    let mut adam = Adam::new(params.num_params());
    let mut lr = cfg.learning_rate;
    let mut plateau = ReduceLrOnPlateau::new(cb.plateau_factor, cb.plateau_min_lr, cb.plateau_patience);
    let mut early = EarlyStopping::new(cb.early_stop_patience);
    let mut best: Option<NetworkParams> = None;
    let mut history = TrainingHistory::default();
    let n = tr.ids.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let params_ref = &params;
            let tr_ref = &tr;
            let parts: Vec<(f64, NetworkParams)> = std::thread::scope(|s| {
                let handles: Vec<_> = shard_ranges(batch.len())
                    .into_iter()
                    .map(|r| {
                        let seeds = &seeds;
                        s.spawn(move || {
                            let mut g = params_ref.zeros_like();
                            let mut l = 0.0;
                            for k in r {
                                let i = batch[k];
                                let rows = emb.rows(&tr_ref.ids[i]);
                                let mut drng = ChaCha8Rng::seed_from_u64(seeds[k]);
                                let trace =
                                    net_forward(params_ref, &rows, Some((cfg.dropout_rate, &mut drng)));
                                let label = tr_ref.labels[i];
                                let w = weights.get(label);
                                l += loss.value(trace.logit, label, w);
                                net_backward(params_ref, &trace, loss.grad(trace.logit, label, w), &mut g);
                            }
                            (l, g)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training worker panicked"))
                    .collect()
            });
            let mut grad = params.zeros_like();
            let mut data_loss = 0.0;
            for (l, g) in &parts {
                data_loss += l;
                grad.add_scaled(g, 1.0);
            }
            let m = batch.len() as f64;
            grad.scale(1.0 / m);
            grad.add_l2_grad(&params, cfg.l2_lambda);
            let batch_loss = data_loss / m + cfg.l2_lambda * params.weight_sq_norm();
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            clip_global_norm(&mut grad, cfg.clipnorm);
            adam.step(&mut params, &grad, lr);
            epoch_loss += batch_loss * m;
        }
        let train_loss = epoch_loss / n as f64;
        let dloss = dev_loss(&params, emb, &dv, loss, cfg.l2_lambda);
        if !dloss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: n.div_ceil(cfg.batch_size),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss: dloss,
            learning_rate: lr,
        });
        log::info!("epoch {epoch}: train_loss={train_loss:.5} dev_loss={dloss:.5} lr={lr:e}");
        let decision = early.observe(dloss, epoch);
        if decision.improved && cb.restore_best {
            best = Some(params.clone());
        }
        if cb.reduce_on_plateau {
            let next = plateau.observe(dloss, lr);
            if next != lr {
                log::info!("epoch {epoch}: reducing learning rate to {next:e}");
            }
            lr = next;
        }
        if cb.early_stopping && decision.stop {
            history.stopped_early = true;
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    history.best_epoch = early.best_epoch();
    if let Some(b) = best.filter(|_| cb.restore_best) {
        history.restored_best = b != params;
        params = b;
    }
    Ok(NeuralModel {
        config: cfg.clone(),
        callbacks: cb.clone(),
        loss,
        class_weights: weights,
        params,
        history,
    })
}

// ---------------------------------------------------------------------------
// Inference and checkpoints

impl NeuralModel {
    pub fn probability(&self, text: &str, emb: &EmbeddingTable) -> Result<f64> {
        if emb.dim() != self.params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.params.input_dim(),
                got: emb.dim(),
            });
        }
        let rows = emb.embed(text, self.config.max_seq_len);
        Ok(sigmoid(net_forward(&self.params, &rows, None).logit))
    }

    pub fn label_for(&self, p: f64) -> Label {
        if p > self.config.sigmoid_threshold {
            Label::Off
        } else {
            Label::Not
        }
    }

    /// Predictions for many texts, computed in parallel.
    pub fn predict_all<'a, I>(&self, texts: I, emb: &EmbeddingTable) -> Result<Vec<(Label, f64)>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let texts: Vec<&str> = texts.into_iter().collect();
        let parts: Vec<Result<Vec<(Label, f64)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = shard_ranges(texts.len())
                .into_iter()
                .map(|r| {
                    let texts = &texts;
                    s.spawn(move || {
                        texts[r]
                            .iter()
                            .map(|t| self.probability(t, emb).map(|p| (self.label_for(p), p)))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(texts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            format: &'a str,
            version: u32,
            model: &'a NeuralModel,
        }
        serde_json::to_writer(
            out,
            &Checkpoint {
                format: CHECKPOINT_FORMAT,
                version: CHECKPOINT_VERSION,
                model: self,
            },
        )?;
        Ok(())
    }

    pub fn read<R: std::io::Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Checkpoint {
            format: String,
            version: u32,
            model: NeuralModel,
        }
        let c: Checkpoint = serde_json::from_reader(input)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                "neural checkpoint",
                format!("unexpected format {:?}", c.format),
            ));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "neural checkpoint",
                format!("unsupported version {}", c.version),
            ));
        }
        c.model.check_shapes()?;
        Ok(c.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |r: String| Err(Error::format("neural checkpoint", r));
        let p = &self.params;
        if p.layers.len() != self.config.layers {
            return bad(format!(
                "{} layers, config says {}",
                p.layers.len(),
                self.config.layers
            ));
        }
        let mut width = p.input_dim();
        for (i, l) in p.layers.iter().enumerate() {
            for d in std::iter::once(&l.forward).chain(l.backward.as_ref()) {
                let h = self.config.units;
                if d.b.len() != 4 * h
                    || (d.w.rows, d.w.cols) != (4 * h, width)
                    || (d.u.rows, d.u.cols) != (4 * h, h)
                    || d.w.data.len() != d.w.rows * d.w.cols
                    || d.u.data.len() != d.u.rows * d.u.cols
                {
                    return bad(format!("layer {i} has inconsistent shapes"));
                }
            }
            if l.backward.is_some() != self.config.bidirectional {
                return bad(format!("layer {i} direction does not match config"));
            }
            width = l.output_dim();
        }
        if p.out_w.len() != width || p.out_b.len() != 1 {
            return bad("output layer has inconsistent shape".into());
        }
        Ok(())
    }
}

pub fn predict_neural(m: &NeuralModel, text: &str, emb: &EmbeddingTable) -> Result<(Label, f64)> {
    let p = m.probability(text, emb)?;
    Ok((m.label_for(p), p))
}
