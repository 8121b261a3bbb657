//! SGD and Adam, and the masked-LM training loop with joint and two-stage
//! schedules.

use std::borrow::Cow;
use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{nth_document, Document, Layout, PopulationSpec, TopicModelConfig};
use crate::error::{config_err, Error, Result};
use crate::loss::{expected_histogram, l2_penalty, label_distribution_loss, masked_loss, shared_column_loss, LossConfig, LossKind};
use crate::masking::{mask_document, sample_masked_counts, MaskedCounts, MaskedDocument, MaskingConfig};
use crate::metrics::rotation_metric;
use crate::model::{backward, backward_summed, forward_columns, forward_histogram, AttentionMode, Gradients, ModelParams, TensorId};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamHyper),
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } => *lr,
            Optimizer::Adam(h) => h.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(dim: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Array2<f64>, grad: &Array2<f64>, state: &mut AdamState, h: &AdamHyper) {
    state.t += 1;
    let b1t = 1.0 - h.beta1.powi(state.t as i32);
    let b2t = 1.0 - h.beta2.powi(state.t as i32);
    ndarray::Zip::from(param)
        .and(grad)
        .and(&mut state.m)
        .and(&mut state.v)
        .for_each(|p, &g, m, v| {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let mhat = *m / b1t;
            let vhat = *v / b2t;
            *p -= h.lr * mhat / (vhat.sqrt() + h.eps);
        });
}

pub fn sgd_step(param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
    param.scaled_add(-lr, grad);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Joint,
    /// Stage 1 trains with uniform attention; stage 2 freezes `W_V`, `b_V`
    /// and restores `W_K`, `W_Q` (and their biases) to their initial values
    /// before training them.
    TwoStage { stage1_steps: usize, analytic_wv: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub log_every: usize,
    pub seed: u64,
    /// Draw fresh masks every step; otherwise each corpus document keeps one
    /// mask pattern for the whole run.
    pub remask_per_step: bool,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, steps: usize, seed: u64) -> Self {
        Self {
            optimizer,
            steps,
            batch_size: 16,
            schedule: Schedule::Joint,
            log_every: 10,
            seed,
            remask_per_step: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(config_err("learning rate must be non-negative"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(config_err("batch size and log interval must be positive"));
        }
        if let Schedule::TwoStage { stage1_steps, .. } = self.schedule {
            if stage1_steps >= self.steps {
                return Err(config_err("stage-1 length must be shorter than the run"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub l2_penalty: f64,
    pub wk_norm: f64,
    pub wq_norm: f64,
    pub wv_norm: f64,
    /// Cosine distance of `W_V` to its value 10 steps earlier.
    pub wv_rotation: Option<f64>,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        self.loss + self.l2_penalty
    }
}

pub const ROTATION_LAG: usize = 10;

/// Training documents addressed by a global index `step * batch + slot`.
pub trait DocumentSource: Sync {
    fn document(&self, index: u64) -> Cow<'_, Document>;
    /// Identity of the underlying document, used to key fixed masks.
    fn key(&self, index: u64) -> u64;
}

/// Fresh documents sampled from the topic model.
pub struct Sampled(pub TopicModelConfig);

impl DocumentSource for Sampled {
    fn document(&self, index: u64) -> Cow<'_, Document> {
        Cow::Owned(nth_document(&self.0, index))
    }

    fn key(&self, index: u64) -> u64 {
        index
    }
}

/// A finite corpus visited cyclically.
pub struct FixedCorpus(pub Vec<Document>);

impl DocumentSource for FixedCorpus {
    fn document(&self, index: u64) -> Cow<'_, Document> {
        Cow::Borrowed(&self.0[(index % self.0.len() as u64) as usize])
    }

    fn key(&self, index: u64) -> u64 {
        index % self.0.len() as u64
    }
}

/// Where training documents come from.
pub enum TrainData<'a> {
    Documents(&'a dyn DocumentSource),
    /// Documents of `length` tokens sampled at the level of token counts
    /// (see `masking::sample_masked_counts`). Needs uniform attention
    /// for the whole run, and fresh masks every step.
    LongDocuments { corpus: TopicModelConfig, length: u64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<StepLog>,
    /// Total number of empty-mask redraws.
    pub mask_retries: u64,
}

/// Loss of one masked document and its gradient.
pub fn document_loss(params: &ModelParams, doc: &MaskedDocument, loss: &LossConfig) -> Result<(f64, Gradients)> {
    let labels = doc.labels();
    let trace = forward_columns(params, &doc.masked, &doc.mask_set)?;
    if let Some(y) = trace.shared_logits() {
        let (l, g) = shared_column_loss(y, &labels, loss.kind)?;
        return Ok((l, backward_summed(params, &trace, &g)?));
    }
    let cols: Vec<usize> = (0..labels.len()).collect();
    let (l, g) = masked_loss(&trace.logits, &labels, &cols, loss.kind)?;
    Ok((l, backward(params, &trace, &g)?))
}

/// Loss of one count-level document under uniform attention.
pub fn counts_loss(params: &ModelParams, doc: &MaskedCounts, loss: &LossConfig) -> Result<(f64, Gradients)> {
    let m = doc.masked();
    if m == 0 {
        return Err(Error::Undefined("loss over an empty mask set".into()));
    }
    let n = doc.length as f64;
    let hist: Array1<f64> = doc.observed.iter().map(|&c| c as f64 / n).collect();
    let q: Array1<f64> = doc.labels.iter().map(|&c| c as f64 / m as f64).collect();
    let trace = forward_histogram(params, hist)?;
    let (l, g) = label_distribution_loss(trace.logits.column(0), &q, loss.kind);
    Ok((l, backward_summed(params, &trace, &g)?))
}

/// Long-document population loss under uniform attention, averaged over
/// `subsets`, with gradients from the model's backward pass. Labels follow
/// the set's word distribution and the input is the expected masked
/// histogram.
pub fn population_objective(
    params: &ModelParams,
    subsets: &[Vec<usize>],
    masking: &MaskingConfig,
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    if subsets.is_empty() {
        return Err(config_err("no topic subsets"));
    }
    let mut total = 0.0;
    let mut grads = Gradients::empty();
    for s in subsets {
        let q = Array1::from(PopulationSpec::new(params.layout, s)?.probs);
        let h = expected_histogram(masking, params.layout, s)?;
        let trace = forward_histogram(params, h)?;
        let (l, g) = label_distribution_loss(trace.logits.column(0), &q, kind);
        total += l;
        grads.add_assign(&backward_summed(params, &trace, &g)?);
    }
    let n = subsets.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

enum Item {
    Doc(MaskedDocument),
    Counts(MaskedCounts),
}

impl Item {
    fn retries(&self) -> u64 {
        match self {
            Item::Doc(d) => d.retries as u64,
            Item::Counts(c) => c.retries as u64,
        }
    }
}

struct Batch {
    loss: f64,
    grads: Gradients,
    retries: u64,
}

fn masked_batch(data: &TrainData<'_>, layout: Layout, masking: &MaskingConfig, cfg: &TrainConfig, step: usize) -> Vec<Item> {
    (0..cfg.batch_size)
        .into_par_iter()
        .map(|slot| {
            let index = (step * cfg.batch_size + slot) as u64;
            match data {
                TrainData::Documents(source) => {
                    let doc = source.document(index);
                    let key = if cfg.remask_per_step { index } else { source.key(index) };
                    let mut r = rng::stream(cfg.seed, Domain::Masking, key);
                    Item::Doc(mask_document(&doc, masking, layout, &mut r))
                }
                TrainData::LongDocuments { corpus, length } => {
                    let mut dr = rng::stream(corpus.seed, Domain::Corpus, index);
                    let mut mr = rng::stream(cfg.seed, Domain::Masking, index);
                    Item::Counts(sample_masked_counts(corpus, *length, masking, &mut dr, &mut mr))
                }
            }
        })
        .collect()
}

fn evaluate_batch(params: &ModelParams, items: &[Item], loss: &LossConfig) -> Result<Batch> {
    let parts: Vec<Result<(f64, Gradients)>> = items
        .par_iter()
        .map(|it| match it {
            Item::Doc(d) => document_loss(params, d, loss),
            Item::Counts(c) => counts_loss(params, c, loss),
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::empty();
    // fixed-order reduction keeps runs bit-identical across thread counts
    for p in parts {
        let (l, g) = p?;
        total += l;
        grads.add_assign(&g);
    }
    let n = items.len() as f64;
    grads.scale(1.0 / n);
    Ok(Batch {
        loss: total / n,
        grads,
        retries: items.iter().map(Item::retries).sum(),
    })
}

struct Stash {
    tensors: Vec<(TensorId, Array2<f64>)>,
}

/// Trains `params` and returns the final parameters with the step logs.
/// `hook` runs at every logged step with the current parameters.
pub fn train(
    params: ModelParams,
    data: &TrainData<'_>,
    masking: &MaskingConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_hook(params, data, masking, loss, cfg, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    mut params: ModelParams,
    data: &TrainData<'_>,
    masking: &MaskingConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&StepLog, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    masking.validate()?;
    loss.validate()?;
    if let TrainData::LongDocuments { corpus, .. } = data {
        corpus.validate()?;
        if corpus.layout != params.layout {
            return Err(config_err("corpus and model layouts differ"));
        }
        if params.attention != AttentionMode::Uniform || cfg.schedule != Schedule::Joint || !cfg.remask_per_step {
            return Err(config_err("count-level documents need uniform attention, a joint schedule and fresh masks"));
        }
    }
    let layout = params.layout;
    let mut adam: Vec<Option<AdamState>> = vec![None; 8];
    let mut history: VecDeque<Array2<f64>> = VecDeque::with_capacity(ROTATION_LAG + 1);
    let mut logs = Vec::new();
    let mut retries = 0u64;
    let mut last_finite = None;

    let user_frozen: Vec<(TensorId, bool)> = TensorId::ALL.iter().map(|&id| (id, params.is_frozen(id))).collect();
    let mut stash = None;
    if let Schedule::TwoStage { .. } = cfg.schedule {
        let ids = [TensorId::Key, TensorId::Query, TensorId::KeyBias, TensorId::QueryBias];
        stash = Some(Stash {
            tensors: ids.iter().map(|&id| (id, params.get(id).clone())).collect(),
        });
        params.set_attention_mode(AttentionMode::Uniform);
    }

    for step in 0..=cfg.steps {
        if let Schedule::TwoStage { stage1_steps, analytic_wv } = cfg.schedule {
            if step == stage1_steps {
                enter_stage_two(&mut params, stash.take(), &user_frozen, analytic_wv, masking)?;
                adam[TensorId::Key.index()] = None;
                adam[TensorId::Query.index()] = None;
            }
        }
        let docs = masked_batch(data, layout, masking, cfg, step);
        let batch = evaluate_batch(&params, &docs, loss)?;
        retries += batch.retries;
        let (pen, pen_grads) = l2_penalty(&params, loss);
        if !batch.loss.is_finite() || !pen.is_finite() || !batch.grads.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite });
        }
        last_finite = Some(batch.loss);

        let wv = params.get(TensorId::Value);
        history.push_back(wv.clone());
        if history.len() > ROTATION_LAG + 1 {
            history.pop_front();
        }
        if step % cfg.log_every == 0 || step == cfg.steps {
            let rotation = if history.len() == ROTATION_LAG + 1 {
                rotation_metric(wv, &history[0]).ok()
            } else {
                None
            };
            let log = StepLog {
                step,
                loss: batch.loss,
                l2_penalty: pen,
                wk_norm: params.frobenius(TensorId::Key),
                wq_norm: params.frobenius(TensorId::Query),
                wv_norm: params.frobenius(TensorId::Value),
                wv_rotation: rotation,
            };
            hook(&log, &params)?;
            logs.push(log);
        }
        if step == cfg.steps {
            break;
        }

        let mut grads = batch.grads;
        // the penalty only reaches trainable tensors
        let mut pen_grads = pen_grads;
        for id in TensorId::ALL {
            if params.is_frozen(id) {
                pen_grads.0[id.index()] = None;
                grads.0[id.index()] = None;
            }
        }
        grads.add_assign(&pen_grads);
        for id in TensorId::ALL {
            let Some(g) = grads.0[id.index()].take() else { continue };
            let p = params.get_mut(id);
            match &cfg.optimizer {
                Optimizer::Sgd { lr } => sgd_step(p, &g, *lr),
                Optimizer::Adam(h) => {
                    let st = adam[id.index()].get_or_insert_with(|| AdamState::zeros(g.dim()));
                    adam_step(p, &g, st, h);
                }
            }
        }
    }
    Ok(TrainOutcome {
        params,
        logs,
        mask_retries: retries,
    })
}

fn enter_stage_two(
    params: &mut ModelParams,
    stash: Option<Stash>,
    user_frozen: &[(TensorId, bool)],
    analytic_wv: bool,
    masking: &MaskingConfig,
) -> Result<()> {
    params.set_attention_mode(AttentionMode::Learned);
    if let Some(stash) = stash {
        for (id, t) in stash.tensors {
            params.set(id, t)?;
        }
    }
    for &(id, frozen) in user_frozen {
        if matches!(id, TensorId::Key | TensorId::Query | TensorId::KeyBias | TensorId::QueryBias) && !params.is_pinned(id) {
            params.set_frozen(id, frozen)?;
        }
    }
    if analytic_wv {
        if params.d() != params.vocab() {
            return Err(config_err("the analytic W_V needs one-hot sized embeddings"));
        }
        let w = crate::analytic::optimal_wv_l2(masking, params.layout)?;
        params.set(TensorId::Value, w)?;
    }
    params.set_frozen(TensorId::Value, true)?;
    params.set_frozen(TensorId::ValueBias, true)?;
    Ok(())
}
