//! One-layer, single-head transformer without residuals, layer norm or
//! positional encodings, with a weight-tied prediction head:
//!
//! `f(X) = W_E^T (W_V Z + b_V 1^T) A(Z) + b_pred 1^T`, `Z = W_E X`,
//! `A(Z) = softmax_cols((W_K Z + b_K 1^T)^T (W_Q Z + b_Q 1^T) / sqrt(d_a))`.
//!
//! `A[i][j]` is the weight position `j` puts on position `i`. Gradients are
//! derived by hand; `backward` is checked against central differences in the
//! tests and in the acceptance suite.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Layout;
use crate::error::{config_err, Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorId {
    Embedding,
    Key,
    Query,
    Value,
    KeyBias,
    QueryBias,
    ValueBias,
    PredBias,
}

impl TensorId {
    pub const ALL: [TensorId; 8] = [
        TensorId::Embedding,
        TensorId::Key,
        TensorId::Query,
        TensorId::Value,
        TensorId::KeyBias,
        TensorId::QueryBias,
        TensorId::ValueBias,
        TensorId::PredBias,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorId::Embedding => "W_E",
            TensorId::Key => "W_K",
            TensorId::Query => "W_Q",
            TensorId::Value => "W_V",
            TensorId::KeyBias => "b_K",
            TensorId::QueryBias => "b_Q",
            TensorId::ValueBias => "b_V",
            TensorId::PredBias => "b_pred",
        }
    }

    pub fn from_name(name: &str) -> Option<TensorId> {
        let lower = name.to_ascii_lowercase();
        Self::ALL.into_iter().find(|t| t.name().to_ascii_lowercase() == lower)
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            TensorId::KeyBias | TensorId::QueryBias | TensorId::ValueBias | TensorId::PredBias
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingMode {
    Trained,
    /// `d = T*v + 1` and `W_E = I`, frozen.
    OneHotFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    Learned,
    /// `W_K`, `W_Q` and their biases pinned at zero, so every attention
    /// column is exactly `1/N`. The forward pass skips the `N x N` matrix.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layout: Layout,
    pub embedding: EmbeddingMode,
    pub attention: AttentionMode,
    /// Embedding width; `None` means `T*v + 1`.
    pub d: Option<usize>,
    /// Attention width; `None` means `d`.
    pub d_attn: Option<usize>,
    pub biases: bool,
    pub sigma0: f64,
}

impl ModelSpec {
    pub fn new(layout: Layout) -> Self {
        Self {
            layout,
            embedding: EmbeddingMode::OneHotFrozen,
            attention: AttentionMode::Learned,
            d: None,
            d_attn: None,
            biases: true,
            sigma0: 0.1,
        }
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let vocab = self.layout.vocab_size();
        let d = match self.embedding {
            EmbeddingMode::OneHotFrozen => {
                if matches!(self.d, Some(d) if d != vocab) {
                    return Err(config_err(format!("one-hot embeddings force d = {vocab}")));
                }
                vocab
            }
            EmbeddingMode::Trained => self.d.unwrap_or(vocab),
        };
        let da = self.d_attn.unwrap_or(d);
        if d == 0 || da == 0 {
            return Err(config_err("d and d_a must be positive"));
        }
        if !(self.sigma0.is_finite() && self.sigma0 >= 0.0) {
            return Err(config_err("sigma0 must be a non-negative number"));
        }
        Ok((d, da))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: Layout,
    pub embedding: EmbeddingMode,
    pub attention: AttentionMode,
    pub biases: bool,
    /// Indexed by `TensorId::index`; biases are stored as single columns.
    tensors: Vec<Array2<f64>>,
    frozen: [bool; 8],
}

fn uniform_fill<R: Rng>(rows: usize, cols: usize, sigma0: f64, rng: &mut R) -> Array2<f64> {
    if sigma0 == 0.0 {
        return Array2::zeros((rows, cols));
    }
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-sigma0..=sigma0))
}

impl ModelParams {
    /// Weights i.i.d. uniform in `[-sigma0, sigma0]`; biases start at zero.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let (d, da) = spec.dims()?;
        let vocab = spec.layout.vocab_size();
        let mut tensors = Vec::with_capacity(8);
        for id in TensorId::ALL {
            let (rows, cols) = shape_for(id, d, da, vocab);
            let mut r = rng::stream(seed, Domain::Init, id.index() as u64);
            let t = match id {
                TensorId::Embedding if spec.embedding == EmbeddingMode::OneHotFrozen => Array2::eye(vocab),
                TensorId::Key | TensorId::Query if spec.attention == AttentionMode::Uniform => Array2::zeros((rows, cols)),
                _ if id.is_bias() => Array2::zeros((rows, cols)),
                _ => uniform_fill(rows, cols, spec.sigma0, &mut r),
            };
            tensors.push(t);
        }
        let mut p = Self {
            layout: spec.layout,
            embedding: spec.embedding,
            attention: spec.attention,
            biases: spec.biases,
            tensors,
            frozen: [false; 8],
        };
        p.enforce_structure();
        Ok(p)
    }

    /// Re-applies the freezes implied by the embedding and attention modes.
    fn enforce_structure(&mut self) {
        if self.embedding == EmbeddingMode::OneHotFrozen {
            self.frozen[TensorId::Embedding.index()] = true;
        }
        if !self.biases {
            for id in [TensorId::KeyBias, TensorId::QueryBias, TensorId::ValueBias] {
                self.tensors[id.index()].fill(0.0);
                self.frozen[id.index()] = true;
            }
        }
        if self.attention == AttentionMode::Uniform {
            for id in [TensorId::Key, TensorId::Query, TensorId::KeyBias, TensorId::QueryBias] {
                self.tensors[id.index()].fill(0.0);
                self.frozen[id.index()] = true;
            }
        }
    }

    pub fn d(&self) -> usize {
        self.tensors[TensorId::Embedding.index()].nrows()
    }

    pub fn d_attn(&self) -> usize {
        self.tensors[TensorId::Key.index()].nrows()
    }

    pub fn vocab(&self) -> usize {
        self.layout.vocab_size()
    }

    pub fn get(&self, id: TensorId) -> &Array2<f64> {
        &self.tensors[id.index()]
    }

    /// Replaces a tensor, checking its shape.
    pub fn set(&mut self, id: TensorId, value: Array2<f64>) -> Result<()> {
        let cur = self.tensors[id.index()].dim();
        if value.dim() != cur {
            return Err(Error::Shape {
                what: id.name().into(),
                expected: format!("{cur:?}"),
                got: format!("{:?}", value.dim()),
            });
        }
        self.tensors[id.index()] = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, id: TensorId) -> &mut Array2<f64> {
        &mut self.tensors[id.index()]
    }

    pub fn is_frozen(&self, id: TensorId) -> bool {
        self.frozen[id.index()]
    }

    /// Freezes or unfreezes a tensor. Unfreezing a tensor pinned by the
    /// embedding or attention mode is rejected.
    pub fn set_frozen(&mut self, id: TensorId, frozen: bool) -> Result<()> {
        if !frozen && self.is_pinned(id) {
            return Err(config_err(format!("{} is pinned by the model mode", id.name())));
        }
        self.frozen[id.index()] = frozen;
        Ok(())
    }

    pub fn is_pinned(&self, id: TensorId) -> bool {
        match id {
            TensorId::Embedding => self.embedding == EmbeddingMode::OneHotFrozen,
            TensorId::Key | TensorId::Query => self.attention == AttentionMode::Uniform,
            TensorId::KeyBias | TensorId::QueryBias => self.attention == AttentionMode::Uniform || !self.biases,
            TensorId::ValueBias => !self.biases,
            _ => false,
        }
    }

    /// Switches attention mode. Entering `Uniform` zeroes and freezes the
    /// attention tensors; leaving it unfreezes them (their values stay zero
    /// until the caller sets them).
    pub fn set_attention_mode(&mut self, mode: AttentionMode) {
        self.attention = mode;
        if mode == AttentionMode::Learned {
            for id in [TensorId::Key, TensorId::Query] {
                self.frozen[id.index()] = false;
            }
            if self.biases {
                for id in [TensorId::KeyBias, TensorId::QueryBias] {
                    self.frozen[id.index()] = false;
                }
            }
        }
        self.enforce_structure();
    }

    pub fn frobenius(&self, id: TensorId) -> f64 {
        self.get(id).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub(crate) fn from_parts(
        layout: Layout,
        embedding: EmbeddingMode,
        attention: AttentionMode,
        biases: bool,
        tensors: Vec<Array2<f64>>,
        frozen: [bool; 8],
    ) -> Result<Self> {
        if tensors.len() != 8 {
            return Err(config_err("expected 8 tensors"));
        }
        let d = tensors[0].nrows();
        let da = tensors[1].nrows();
        let vocab = layout.vocab_size();
        for id in TensorId::ALL {
            let want = shape_for(id, d, da, vocab);
            if tensors[id.index()].dim() != want {
                return Err(Error::Shape {
                    what: id.name().into(),
                    expected: format!("{want:?}"),
                    got: format!("{:?}", tensors[id.index()].dim()),
                });
            }
        }
        if embedding == EmbeddingMode::OneHotFrozen && tensors[0] != Array2::<f64>::eye(vocab) {
            return Err(config_err("one-hot mode requires W_E = I"));
        }
        let mut p = Self {
            layout,
            embedding,
            attention,
            biases,
            tensors,
            frozen,
        };
        p.enforce_structure();
        Ok(p)
    }
}

fn shape_for(id: TensorId, d: usize, da: usize, vocab: usize) -> (usize, usize) {
    match id {
        TensorId::Embedding => (d, vocab),
        TensorId::Key | TensorId::Query => (da, d),
        TensorId::Value => (d, d),
        TensorId::KeyBias | TensorId::QueryBias => (da, 1),
        TensorId::ValueBias => (d, 1),
        TensorId::PredBias => (vocab, 1),
    }
}

fn col(b: &Array2<f64>) -> ArrayView1<'_, f64> {
    b.column(0)
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns(scores: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = scores.clone();
    for (j, mut c) in out.columns_mut().into_iter().enumerate() {
        let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() || c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteScores { column: j });
        }
        c.mapv_inplace(|x| (x - m).exp());
        let total = c.sum();
        c /= total;
    }
    Ok(out)
}

fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(config_err("empty document"));
    }
    let vocab = params.vocab();
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

fn embed(params: &ModelParams, tokens: &[usize]) -> Array2<f64> {
    let we = params.get(TensorId::Embedding);
    let mut z = Array2::zeros((we.nrows(), tokens.len()));
    for (j, &t) in tokens.iter().enumerate() {
        z.column_mut(j).assign(&we.column(t));
    }
    z
}

fn affine(w: &Array2<f64>, z: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = w.dot(z);
    out += &b.view();
    out
}

/// `W Z + b 1^T`; in one-hot mode `Z` is implicit and `W Z` is a column
/// gather.
fn project(params: &ModelParams, w: TensorId, b: TensorId, z: &Array2<f64>, tokens: &[usize]) -> Array2<f64> {
    if params.embedding != EmbeddingMode::OneHotFrozen {
        return affine(params.get(w), z, params.get(b));
    }
    let w = params.get(w);
    let b = col(params.get(b));
    let mut out = Array2::zeros((w.nrows(), tokens.len()));
    for (j, &t) in tokens.iter().enumerate() {
        let mut c = out.column_mut(j);
        c.assign(&w.column(t));
        c += &b;
    }
    out
}

/// `dOut Z^T` for a projection computed by `project`.
fn project_grad(params: &ModelParams, d_out: &Array2<f64>, z: &Array2<f64>, tokens: &[usize]) -> Array2<f64> {
    if params.embedding != EmbeddingMode::OneHotFrozen {
        return d_out.dot(&z.t());
    }
    let mut g = Array2::zeros((d_out.nrows(), params.vocab()));
    for (j, &t) in tokens.iter().enumerate() {
        let mut c = g.column_mut(t);
        c += &d_out.column(j);
    }
    g
}

fn gather_columns(m: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    m.select(Axis(1), cols)
}

/// Attention weights `A(Z)` for an embedded sequence `Z` (`d x N`).
pub fn attention_weights(params: &ModelParams, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.nrows() != params.d() {
        return Err(Error::Shape {
            what: "Z".into(),
            expected: format!("{} rows", params.d()),
            got: format!("{} rows", z.nrows()),
        });
    }
    let n = z.ncols();
    if params.attention == AttentionMode::Uniform {
        return Ok(Array2::from_elem((n, n), 1.0 / n as f64));
    }
    let k = affine(params.get(TensorId::Key), z, params.get(TensorId::KeyBias));
    let q = affine(params.get(TensorId::Query), z, params.get(TensorId::QueryBias));
    let scale = 1.0 / (params.d_attn() as f64).sqrt();
    softmax_columns(&(k.t().dot(&q) * scale))
}

#[derive(Debug, Clone)]
pub enum TraceKind {
    Dense {
        keys: Array2<f64>,
        /// Queries of the computed columns only.
        queries: Array2<f64>,
        /// Pre-softmax scores, `N x m`.
        scores: Array2<f64>,
        /// Attention columns, `N x m`.
        attn: Array2<f64>,
        values: Array2<f64>,
        /// `values * attn`, `d x m`.
        mixed: Array2<f64>,
    },
    Uniform {
        zbar: Array1<f64>,
        hbar: Array1<f64>,
        /// Token frequencies (counts / N).
        hist: Array1<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// Positions whose outputs were computed, in order.
    pub columns: Vec<usize>,
    pub z: Array2<f64>,
    pub kind: TraceKind,
    /// `vocab x columns.len()`; under uniform attention all columns are equal.
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    /// Full `N x N` attention matrix, or its computed columns.
    pub fn attention(&self) -> Array2<f64> {
        let n = self.tokens.len();
        match &self.kind {
            TraceKind::Dense { attn, .. } => attn.clone(),
            TraceKind::Uniform { .. } => Array2::from_elem((n, self.columns.len()), 1.0 / n as f64),
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.kind, TraceKind::Uniform { .. })
    }

    /// The shared logit column under uniform attention.
    pub fn shared_logits(&self) -> Option<ArrayView1<'_, f64>> {
        self.is_uniform().then(|| self.logits.column(0))
    }
}

pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<ForwardTrace> {
    let cols: Vec<usize> = (0..tokens.len()).collect();
    forward_columns(params, tokens, &cols)
}

/// Forward pass on a one-hot input matrix.
pub fn forward_one_hot(params: &ModelParams, x: &Array2<f64>) -> Result<ForwardTrace> {
    if x.nrows() != params.vocab() {
        return Err(Error::Shape {
            what: "X".into(),
            expected: format!("{} rows", params.vocab()),
            got: format!("{} rows", x.nrows()),
        });
    }
    let tokens = crate::corpus::decode(x)?;
    forward(params, &tokens)
}

/// Uniform-attention forward pass from token frequencies alone. The trace
/// has no tokens and a single logit column.
pub fn forward_histogram(params: &ModelParams, hist: Array1<f64>) -> Result<ForwardTrace> {
    if params.attention != AttentionMode::Uniform {
        return Err(Error::Unsupported("a histogram determines the output only under uniform attention".into()));
    }
    if hist.len() != params.vocab() {
        return Err(Error::Shape {
            what: "histogram".into(),
            expected: format!("{}", params.vocab()),
            got: format!("{}", hist.len()),
        });
    }
    let we = params.get(TensorId::Embedding);
    let zbar = we.dot(&hist);
    let hbar = params.get(TensorId::Value).dot(&zbar) + col(params.get(TensorId::ValueBias));
    let y = we.t().dot(&hbar) + col(params.get(TensorId::PredBias));
    let logits = y.insert_axis(Axis(1));
    Ok(ForwardTrace {
        tokens: Vec::new(),
        columns: Vec::new(),
        z: Array2::zeros((0, 0)),
        kind: TraceKind::Uniform { zbar, hbar, hist },
        logits,
    })
}

/// Forward pass computing outputs only at `columns` (e.g. the masked set).
pub fn forward_columns(params: &ModelParams, tokens: &[usize], columns: &[usize]) -> Result<ForwardTrace> {
    check_tokens(params, tokens)?;
    if let Some(&c) = columns.iter().find(|&&c| c >= tokens.len()) {
        return Err(config_err(format!("column {c} outside a document of length {}", tokens.len())));
    }
    let we = params.get(TensorId::Embedding);
    let bpred = col(params.get(TensorId::PredBias));
    let m = columns.len();
    if params.attention == AttentionMode::Uniform {
        let mut trace = forward_histogram(params, histogram(tokens, params.vocab()))?;
        trace.tokens = tokens.to_vec();
        trace.columns = columns.to_vec();
        let y = trace.logits.column(0).to_owned();
        trace.logits = y.broadcast((m, y.len())).expect("broadcast").t().to_owned();
        return Ok(trace);
    }
    let one_hot = params.embedding == EmbeddingMode::OneHotFrozen;
    // with W_E = I the embedded sequence is never materialized
    let z = if one_hot { Array2::zeros((0, 0)) } else { embed(params, tokens) };
    let col_tokens: Vec<usize> = columns.iter().map(|&c| tokens[c]).collect();
    let zc = if one_hot { Array2::zeros((0, 0)) } else { gather_columns(&z, columns) };
    let keys = project(params, TensorId::Key, TensorId::KeyBias, &z, tokens);
    let queries = project(params, TensorId::Query, TensorId::QueryBias, &zc, &col_tokens);
    let scale = 1.0 / (params.d_attn() as f64).sqrt();
    let scores = keys.t().dot(&queries) * scale;
    let attn = softmax_columns(&scores)?;
    let values = project(params, TensorId::Value, TensorId::ValueBias, &z, tokens);
    let mixed = values.dot(&attn);
    let mut logits = we.t().dot(&mixed);
    logits += &bpred.broadcast((m, bpred.len())).expect("broadcast").t();
    debug_assert_eq!(logits.dim(), (params.vocab(), m));
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        columns: columns.to_vec(),
        z,
        kind: TraceKind::Dense {
            keys,
            queries,
            scores,
            attn,
            values,
            mixed,
        },
        logits,
    })
}

/// Gradients per tensor; `None` for frozen tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub [Option<Array2<f64>>; 8]);

impl Gradients {
    pub fn empty() -> Self {
        Self(Default::default())
    }

    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.0[id.index()].as_ref()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => *a += b,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            *g *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

fn slot(params: &ModelParams, id: TensorId, value: impl FnOnce() -> Array2<f64>) -> Option<Array2<f64>> {
    (!params.is_frozen(id)).then(value)
}

fn as_col(v: Array1<f64>) -> Array2<f64> {
    let n = v.len();
    v.into_shape_with_order((n, 1)).expect("column")
}

/// Gradients of a scalar loss given `d loss / d logits` at the trace's
/// computed columns (`vocab x columns.len()`).
pub fn backward(params: &ModelParams, trace: &ForwardTrace, loss_grad: &Array2<f64>) -> Result<Gradients> {
    let want = (params.vocab(), trace.columns.len());
    if loss_grad.dim() != want {
        return Err(Error::Shape {
            what: "loss gradient".into(),
            expected: format!("{want:?}"),
            got: format!("{:?}", loss_grad.dim()),
        });
    }
    match &trace.kind {
        TraceKind::Uniform { .. } => backward_summed(params, trace, &loss_grad.sum_axis(Axis(1))),
        TraceKind::Dense {
            keys,
            queries,
            attn,
            values,
            mixed,
            ..
        } => Ok(backward_dense(params, trace, loss_grad, keys, queries, attn, values, mixed)),
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_dense(
    params: &ModelParams,
    trace: &ForwardTrace,
    g: &Array2<f64>,
    keys: &Array2<f64>,
    queries: &Array2<f64>,
    attn: &Array2<f64>,
    values: &Array2<f64>,
    mixed: &Array2<f64>,
) -> Gradients {
    use TensorId::*;
    let we = params.get(Embedding);
    let z = &trace.z;
    let mut out = Gradients::empty();
    out.0[PredBias.index()] = slot(params, PredBias, || as_col(g.sum_axis(Axis(1))));

    let d_mixed = we.dot(g);
    let d_values = d_mixed.dot(&attn.t());
    out.0[Value.index()] = slot(params, Value, || project_grad(params, &d_values, z, &trace.tokens));
    out.0[ValueBias.index()] = slot(params, ValueBias, || as_col(d_values.sum_axis(Axis(1))));

    let need_attn = [Key, Query, KeyBias, QueryBias, Embedding].iter().any(|id| !params.is_frozen(*id));
    let need_dz = !params.is_frozen(Embedding);
    let mut dz = need_dz.then(|| params.get(Value).t().dot(&d_values));

    if need_attn {
        let d_attn = values.t().dot(&d_mixed);
        let mut d_scores = Array2::zeros(attn.dim());
        for c in 0..attn.ncols() {
            let a = attn.column(c);
            let ga = d_attn.column(c);
            let dot = a.dot(&ga);
            d_scores.column_mut(c).assign(&(&a * &(&ga - dot)));
        }
        let scale = 1.0 / (params.d_attn() as f64).sqrt();
        let d_keys = queries.dot(&d_scores.t()) * scale;
        let d_queries = keys.dot(&d_scores) * scale;
        let col_tokens: Vec<usize> = trace.columns.iter().map(|&c| trace.tokens[c]).collect();
        let zc = if params.embedding == EmbeddingMode::OneHotFrozen { Array2::zeros((0, 0)) } else { gather_columns(z, &trace.columns) };
        out.0[Key.index()] = slot(params, Key, || project_grad(params, &d_keys, z, &trace.tokens));
        out.0[KeyBias.index()] = slot(params, KeyBias, || as_col(d_keys.sum_axis(Axis(1))));
        out.0[Query.index()] = slot(params, Query, || project_grad(params, &d_queries, &zc, &col_tokens));
        out.0[QueryBias.index()] = slot(params, QueryBias, || as_col(d_queries.sum_axis(Axis(1))));
        if let Some(dz) = dz.as_mut() {
            *dz += &params.get(Key).t().dot(&d_keys);
            let dq_z = params.get(Query).t().dot(&d_queries);
            for (k, &c) in trace.columns.iter().enumerate() {
                let mut target = dz.column_mut(c);
                target += &dq_z.column(k);
            }
        }
    }

    if let Some(dz) = dz {
        // prediction-head role plus embedding role
        let mut dwe = mixed.dot(&g.t());
        for (j, &t) in trace.tokens.iter().enumerate() {
            let mut target = dwe.column_mut(t);
            target += &dz.column(j);
        }
        out.0[Embedding.index()] = Some(dwe);
    }
    out
}

/// Backward pass under uniform attention given the column-sum of the logit
/// gradient.
pub fn backward_summed(params: &ModelParams, trace: &ForwardTrace, g_sum: &Array1<f64>) -> Result<Gradients> {
    use TensorId::*;
    let TraceKind::Uniform { zbar, hbar, hist } = &trace.kind else {
        return Err(Error::Unsupported("summed backward needs a uniform-attention trace".into()));
    };
    let we = params.get(Embedding);
    let mut out = Gradients::empty();
    out.0[PredBias.index()] = slot(params, PredBias, || as_col(g_sum.clone()));
    let d_h = we.dot(g_sum);
    out.0[Value.index()] = slot(params, Value, || outer(&d_h, zbar));
    out.0[ValueBias.index()] = slot(params, ValueBias, || as_col(d_h.clone()));
    if !params.is_frozen(Embedding) {
        let d_zbar = params.get(Value).t().dot(&d_h);
        let dwe = outer(hbar, g_sum) + outer(&d_zbar, hist);
        out.0[Embedding.index()] = Some(dwe);
    }
    Ok(out)
}

/// Token frequencies of a sequence over the vocabulary.
pub fn histogram(tokens: &[usize], vocab: usize) -> Array1<f64> {
    let mut counts = vec![0u32; vocab];
    for &t in tokens {
        counts[t] += 1;
    }
    let n = tokens.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for (i, ai) in a.iter().enumerate() {
        m.row_mut(i).assign(&(b * *ai));
    }
    m
}
