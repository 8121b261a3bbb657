//! Closed-form optima under uniform attention and the attention-level
//! bounds for frozen value matrices.
//!
//! | name here | role |
//! |-----------|------|
//! | `k1`, `k2`, `k3` | constants of the regularized value optimum |
//! | `alpha`, `beta` | attention levels, see `landscape::AttentionLevels` |

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::Layout;
use crate::error::{config_err, Error, Result};
use crate::masking::MaskingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WvConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

fn check_masking(cfg: &MaskingConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.p_mask <= 0.0 || cfg.p_keep + cfg.p_random >= 1.0 {
        return Err(config_err("closed forms need p_m > 0 and p_c + p_r < 1"));
    }
    Ok(())
}

pub fn wv_constants(cfg: &MaskingConfig, layout: Layout) -> Result<WvConstants> {
    check_masking(cfg)?;
    let (pm, pc, pr) = (cfg.p_mask, cfg.p_keep, cfg.p_random);
    let tv = layout.num_words() as f64;
    let keep = 1.0 - (1.0 - pc) * pm;
    Ok(WvConstants {
        k1: pr / ((1.0 - pc - pr) * keep * tv),
        k2: 1.0 / ((1.0 - pc - pr) * pm) - 1.0,
        k3: 1.0 / keep,
    })
}

/// Which linear family a matrix is checked against: the value family
/// carries a `-k1` offset in column 0, the embedding Gram family does not
/// (the prediction bias absorbs it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Value,
    Embedding,
}

impl Family {
    fn offset(self, k: &WvConstants) -> f64 {
        match self {
            Family::Value => k.k1,
            Family::Embedding => 0.0,
        }
    }
}

/// Family member with free constants `u` (length `T*v + 1`), spreading each
/// block sum evenly over the block's columns.
pub fn family_member(cfg: &MaskingConfig, layout: Layout, family: Family, u: &[f64]) -> Result<Array2<f64>> {
    let vocab = layout.vocab_size();
    if u.len() != vocab {
        return Err(Error::Shape {
            what: "u".into(),
            expected: format!("{vocab}"),
            got: format!("{}", u.len()),
        });
    }
    let k = wv_constants(cfg, layout)?;
    let v = layout.words_per_topic as f64;
    let mut w = Array2::zeros((vocab, vocab));
    w[[0, 0]] = -k.k2 * u[0];
    for l in 1..vocab {
        w[[0, l]] = u[0];
    }
    for i in 1..vocab {
        let ti = layout.topic_of(i)?;
        w[[i, 0]] = -family.offset(&k) - k.k2 * u[i];
        for l in 1..vocab {
            let own = layout.topic_of(l)? == ti;
            w[[i, l]] = u[i] + if own { k.k3 / v } else { 0.0 };
        }
    }
    Ok(w)
}

/// Minimum-norm member of the value family, the `lambda -> 0` limit of the
/// L2-regularized optimum.
pub fn optimal_wv_l2(cfg: &MaskingConfig, layout: Layout) -> Result<Array2<f64>> {
    let k = wv_constants(cfg, layout)?;
    let tv = layout.num_words() as f64;
    let diff = -(k.k1 * k.k2 + k.k3) / (k.k2 * k.k2 + tv);
    let mut u = vec![diff; layout.vocab_size()];
    u[0] = 0.0;
    family_member(cfg, layout, Family::Value, &u)
}

/// Entries of the minimum-norm value optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WvEntries {
    pub diff_topic: f64,
    pub same_topic: f64,
    pub column0: f64,
}

pub fn optimal_wv_entries(cfg: &MaskingConfig, layout: Layout) -> Result<WvEntries> {
    let k = wv_constants(cfg, layout)?;
    let tv = layout.num_words() as f64;
    let v = layout.words_per_topic as f64;
    let denom = k.k2 * k.k2 + tv;
    let diff = -(k.k1 * k.k2 + k.k3) / denom;
    Ok(WvEntries {
        diff_topic: diff,
        same_topic: diff + k.k3 / v,
        column0: (k.k2 * k.k3 - k.k1 * tv) / denom,
    })
}

/// The family member with zero off-diagonal word entries.
pub fn diagonal_wv(cfg: &MaskingConfig, layout: Layout) -> Result<Array2<f64>> {
    let k = wv_constants(cfg, layout)?;
    let vocab = layout.vocab_size();
    let mut w = Array2::zeros((vocab, vocab));
    for i in 1..vocab {
        w[[i, i]] = k.k3;
        w[[i, 0]] = -k.k1;
    }
    Ok(w)
}

/// The zero-`u` value family member with uniform blocks: same-topic entries
/// `k3 / v`, column 0 at `-k1`.
pub fn uniform_block_wv(cfg: &MaskingConfig, layout: Layout) -> Result<Array2<f64>> {
    family_member(cfg, layout, Family::Value, &vec![0.0; layout.vocab_size()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    /// `W[i][0]` against `-offset - k2 u_i` (or `W[0][0]` against `-k2 u_0`).
    Column0,
    /// Block sum over the row's own topic.
    OwnTopic,
    /// Block sum over topic `t` (1-based) other than the row's own.
    OtherTopic(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    /// Least-squares free constant per row.
    pub u: Vec<f64>,
    /// Largest absolute residual per row.
    pub row_residual: Vec<f64>,
    pub max_residual: f64,
    pub worst_row: usize,
    pub worst_constraint: Constraint,
    pub member: bool,
}

/// Fits `u_i` per row by least squares and reports the constraint
/// residuals.
pub fn check_family_membership(w: &Array2<f64>, cfg: &MaskingConfig, layout: Layout, family: Family, tol: f64) -> Result<FamilyReport> {
    let vocab = layout.vocab_size();
    if w.dim() != (vocab, vocab) {
        return Err(Error::Shape {
            what: "W".into(),
            expected: format!("({vocab}, {vocab})"),
            got: format!("{:?}", w.dim()),
        });
    }
    let k = wv_constants(cfg, layout)?;
    let t_count = layout.num_topics;
    let v = layout.words_per_topic as f64;
    let mut u = vec![0.0; vocab];
    let mut row_residual = vec![0.0; vocab];
    let (mut max_residual, mut worst_row, mut worst_constraint) = (0.0, 0, Constraint::Column0);
    for i in 0..vocab {
        let sums: Vec<f64> = (1..=t_count).map(|t| layout.topic_words(t).map(|l| w[[i, l]]).sum()).collect();
        let own = if i == 0 { None } else { Some(layout.topic_of(i)?) };
        let offset = if i == 0 { 0.0 } else { family.offset(&k) };
        // residuals: w0 + offset + k2 u, S_t - [t == own] k3 - v u
        let target: Vec<f64> = (1..=t_count).map(|t| sums[t - 1] - if Some(t) == own { k.k3 } else { 0.0 }).collect();
        let num = -k.k2 * (w[[i, 0]] + offset) + v * target.iter().sum::<f64>();
        let ui = num / (k.k2 * k.k2 + v * v * t_count as f64);
        u[i] = ui;
        let mut worst = ((w[[i, 0]] + offset + k.k2 * ui).abs(), Constraint::Column0);
        for t in 1..=t_count {
            let r = (target[t - 1] - v * ui).abs();
            if r > worst.0 {
                worst = (r, if Some(t) == own { Constraint::OwnTopic } else { Constraint::OtherTopic(t) });
            }
        }
        row_residual[i] = worst.0;
        if worst.0 > max_residual {
            max_residual = worst.0;
            worst_row = i;
            worst_constraint = worst.1;
        }
    }
    Ok(FamilyReport {
        u,
        row_residual,
        max_residual,
        worst_row,
        worst_constraint,
        member: max_residual <= tol,
    })
}

/// Realizable embedding optimum under uniform attention with `W_V = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOptimum {
    /// `E* = k3 I`.
    pub gram: Array2<f64>,
    /// `W_E = sqrt(k3) I`, so that `W_E^T W_E = E*`.
    pub embedding: Array2<f64>,
    pub b_pred: Array1<f64>,
}

/// Word rows of the prediction bias are `-p_m p_r k3 / (T v)`. With
/// `E*_00 = k3` the mask row predicts `k3 p_m (1 - p_c - p_r)` before the
/// bias, so `b_pred[0]` is set to cancel it; any other choice leaves a
/// nonzero gradient in row 0.
pub fn optimal_embedding(cfg: &MaskingConfig, layout: Layout) -> Result<EmbeddingOptimum> {
    let k = wv_constants(cfg, layout)?;
    let vocab = layout.vocab_size();
    let mut b = Array1::from_elem(vocab, word_pred_bias(cfg, layout)?);
    b[0] = -k.k3 * cfg.p_mask_token();
    Ok(EmbeddingOptimum {
        gram: Array2::eye(vocab) * k.k3,
        embedding: Array2::eye(vocab) * k.k3.sqrt(),
        b_pred: b,
    })
}

/// `-p_m p_r / ((1 - (1 - p_c) p_m) T v)`.
pub fn word_pred_bias(cfg: &MaskingConfig, layout: Layout) -> Result<f64> {
    let k = wv_constants(cfg, layout)?;
    Ok(-cfg.p_mask * cfg.p_random * k.k3 / layout.num_words() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundsCase {
    Block,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBounds {
    pub case: BoundsCase,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Block: admissible `gamma`; diagonal: admissible `beta`.
    pub interval: (f64, f64),
    /// Diagonal only: `alpha < slope * beta`.
    pub slope: Option<f64>,
    pub warnings: Vec<String>,
}

impl AttentionBounds {
    /// Whether an `(alpha, beta)` pair lies in the admissible region.
    pub fn contains(&self, alpha: f64, beta: f64, v: usize) -> bool {
        let (lo, hi) = self.interval;
        match self.case {
            BoundsCase::Block => {
                let g = ((v as f64 - 1.0) * alpha + beta) / v as f64;
                lo < g && g < hi
            }
            BoundsCase::Diagonal => lo < beta && beta < hi && alpha < self.slope.unwrap_or(f64::INFINITY) * beta,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "case": match self.case { BoundsCase::Block => "block", BoundsCase::Diagonal => "diagonal" },
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "lambda4": self.lambda4,
            "lambda5": self.lambda5,
            "interval": [self.interval.0, self.interval.1],
            "slope": self.slope,
            "warnings": self.warnings,
        })
    }
}

pub fn attention_bounds(cfg: &MaskingConfig, layout: Layout, tau: usize, case: BoundsCase) -> Result<AttentionBounds> {
    check_masking(cfg)?;
    if tau == 0 || tau > layout.num_topics {
        return Err(config_err(format!("tau = {tau} must lie in [1, T = {}]", layout.num_topics)));
    }
    let (pm, pc, pr) = (cfg.p_mask, cfg.p_keep, cfg.p_random);
    let v = layout.words_per_topic as f64;
    let t = layout.num_topics as f64;
    let keep = 1.0 - (1.0 - pc) * pm;
    let lambda1 = (keep + pm * pr) * (1.0 + (1.0 - pc) * pm) / (2.0 * keep);
    let lambda2 = 100.0 * (keep / (pm * pr) + 1.0);
    let lambda3 = (keep + pm * pr) / 100.0 * v;
    let lambda4 = keep / ((v - 1.0).sqrt() - 2.0 + (1.0 - pc) * pm) * (1.0 - (1.0 - pc - pr) * pm) / (pm * pr) * v;
    let lambda5 = 1.0 / ((v - 1.0) * keep);
    let mut warnings = Vec::new();
    if !(pm < 0.5 && pc == pr) {
        warnings.push(format!("masking ({pm}, {pc}, {pr}) is outside p_m < 1/2, p_c = p_r; bounds are not guaranteed"));
    }
    let tau_f = tau as f64;
    let (interval, slope) = match case {
        BoundsCase::Block => ((lambda1 * (tau_f - 1.0), lambda2 * t), None),
        BoundsCase::Diagonal => {
            if (v - 1.0).sqrt() - 2.0 + (1.0 - pc) * pm <= 0.0 {
                warnings.push("v is too small for a positive diagonal upper bound".into());
            }
            ((lambda3 * tau_f, lambda4 * t), Some(lambda5))
        }
    };
    Ok(AttentionBounds {
        case,
        lambda1,
        lambda2,
        lambda3,
        lambda4,
        lambda5,
        interval,
        slope,
        warnings,
    })
}
