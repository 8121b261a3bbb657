//! Population squared loss as a function of a three-level attention
//! pattern, with the value map frozen.
//!
//! Under the pattern a query on observed word `w` puts weight proportional
//! to `beta` on positions holding `w`, `alpha` on other words of `w`'s
//! topic, 1 on every other word and 0 on mask tokens. The value map is
//! either block-uniform (`(W y)_i = q(mean of y over topic(i))`) or the
//! diagonal optimum. Losses are the contribution of masked positions whose
//! observed token is not the mask, i.e. `(p_c + p_r)` times the conditional
//! mean over those positions; mask-token queries do not depend on the
//! pattern.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{attention_bounds, wv_constants, AttentionBounds, BoundsCase};
use crate::corpus::{self, Layout, LengthPolicy, TopicModelConfig, TopicPolicy};
use crate::error::{config_err, Result};
use crate::masking::{mask_document, masked_distribution, MaskingConfig, MASK};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionLevels {
    pub alpha: f64,
    pub beta: f64,
}

impl AttentionLevels {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(config_err(format!("attention levels must be positive, got alpha = {alpha}, beta = {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn gamma(&self, v: usize) -> f64 {
        ((v as f64 - 1.0) * self.alpha + self.beta) / v as f64
    }
}

/// Problem setting shared by every cell of a landscape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSetting {
    pub case: BoundsCase,
    pub masking: MaskingConfig,
    pub layout: Layout,
    pub tau: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub loss: f64,
    pub se: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub exact_loss: f64,
    pub mc: Option<McEstimate>,
    pub p1: f64,
    pub p2: f64,
    pub z1: f64,
    pub z2: f64,
}

/// Observed-word probabilities and the column normalizers, for
/// unnormalized levels `same` (same word), `topic` (same topic, other word)
/// and `base` (other topics).
struct Normalizers {
    p1: f64,
    p2: f64,
    z1: f64,
    z2: f64,
}

fn normalizers(same: f64, topic: f64, base: f64, s: &LandscapeSetting) -> Result<Normalizers> {
    let stats = masked_distribution(&s.masking, s.layout, s.tau)?;
    let (p1, p2) = (stats.p_in, stats.p_out);
    let v = s.layout.words_per_topic as f64;
    let t = s.layout.num_topics as f64;
    let tau = s.tau as f64;
    let z1 = same * p1 + topic * p1 * (v - 1.0) + base * p1 * v * (tau - 1.0) + base * p2 * v * (t - tau);
    let z2 = same * p2 + topic * p2 * (v - 1.0) + base * p1 * v * tau + base * p2 * v * (t - tau - 1.0);
    Ok(Normalizers { p1, p2, z1, z2 })
}

fn check_setting(s: &LandscapeSetting) -> Result<()> {
    s.masking.validate()?;
    if s.tau == 0 || s.tau > s.layout.num_topics {
        return Err(config_err(format!("tau = {} must lie in [1, T = {}]", s.tau, s.layout.num_topics)));
    }
    Ok(())
}

/// Exact loss for unnormalized levels; invariant under a common rescaling.
pub fn exact_loss_levels(same: f64, topic: f64, base: f64, s: &LandscapeSetting) -> Result<f64> {
    check_setting(s)?;
    let k = wv_constants(&s.masking, s.layout)?;
    let (pc, pr) = (s.masking.p_keep, s.masking.p_random);
    let nz = normalizers(same, topic, base, s)?;
    let (p1, p2, z1, z2) = (nz.p1, nz.p2, nz.z1, nz.z2);
    let v = s.layout.words_per_topic as f64;
    let t = s.layout.num_topics as f64;
    let tau = s.tau as f64;
    let sq = |x: f64| x * x;
    let loss = match s.case {
        BoundsCase::Block => {
            // shift = p_m p_r k3 / (T v)
            let shift = s.masking.p_mask * pr * k.k3 / (t * v);
            let q = |x: f64| k.k3 * x - shift;
            let g1 = (p1 * same + (v - 1.0) * p1 * topic) / (v * z1);
            let g2 = (p2 * same + (v - 1.0) * p2 * topic) / (v * z2);
            let in1 = q(p1 * base / z1);
            let out1 = q(p2 * base / z1);
            let in2 = q(p1 * base / z2);
            let out2 = q(p2 * base / z2);
            let case1 = sq(1.0 - q(g1)) + sq(q(g1)) * (v - 1.0) + sq(in1) * v * (tau - 1.0) + sq(out1) * v * (t - tau);
            let case2 = sq(1.0 - in1) + sq(q(g1)) * v + sq(in1) * (v * (tau - 1.0) - 1.0) + sq(out1) * v * (t - tau);
            let case3 = sq(1.0 - in2) + sq(in2) * (v * tau - 1.0) + sq(q(g2)) * v + sq(out2) * v * (t - tau - 1.0);
            (pc + pr / t) * case1 + pr * (tau - 1.0) / t * case2 + pr * (1.0 - tau / t) * case3
        }
        BoundsCase::Diagonal => {
            let c = k.k3;
            let b1 = c * p1 * same / z1;
            let a1 = c * p1 * topic / z1;
            let in1 = c * p1 * base / z1;
            let out1 = c * p2 * base / z1;
            let b2 = c * p2 * same / z2;
            let a2 = c * p2 * topic / z2;
            let in2 = c * p1 * base / z2;
            let out2 = c * p2 * base / z2;
            let case1 = sq(1.0 - b1) + sq(a1) * (v - 1.0) + sq(in1) * v * (tau - 1.0) + sq(out1) * v * (t - tau);
            let case2 = sq(1.0 - a1) + sq(b1) + sq(a1) * (v - 2.0) + sq(in1) * v * (tau - 1.0) + sq(out1) * v * (t - tau);
            let case3 = sq(1.0 - in1) + sq(b1) + sq(a1) * (v - 1.0) + sq(in1) * (v * (tau - 1.0) - 1.0) + sq(out1) * v * (t - tau);
            let case4 = sq(1.0 - in2) + sq(in2) * (v * tau - 1.0) + sq(b2) + sq(a2) * (v - 1.0) + sq(out2) * v * (t - tau - 1.0);
            (pc + pr / (v * t)) * case1 + pr / t * (1.0 - 1.0 / v) * case2 + pr * (tau - 1.0) / t * case3 + pr * (1.0 - tau / t) * case4
        }
    };
    Ok(loss)
}

pub fn exact_loss_block(levels: AttentionLevels, masking: &MaskingConfig, layout: Layout, tau: usize) -> Result<f64> {
    let s = LandscapeSetting { case: BoundsCase::Block, masking: *masking, layout, tau };
    exact_loss_levels(levels.beta, levels.alpha, 1.0, &s)
}

pub fn exact_loss_diagonal(levels: AttentionLevels, masking: &MaskingConfig, layout: Layout, tau: usize) -> Result<f64> {
    let s = LandscapeSetting { case: BoundsCase::Diagonal, masking: *masking, layout, tau };
    exact_loss_levels(levels.beta, levels.alpha, 1.0, &s)
}

pub fn evaluate(levels: AttentionLevels, s: &LandscapeSetting) -> Result<LandscapePoint> {
    let nz = normalizers(levels.beta, levels.alpha, 1.0, s)?;
    Ok(LandscapePoint {
        alpha: levels.alpha,
        beta: levels.beta,
        gamma: levels.gamma(s.layout.words_per_topic),
        exact_loss: exact_loss_levels(levels.beta, levels.alpha, 1.0, s)?,
        mc: None,
        p1: nz.p1,
        p2: nz.p2,
        z1: nz.z1,
        z2: nz.z2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub doc_len: usize,
    /// Minimum number of non-mask masked positions to average over.
    pub positions: usize,
    pub seed: u64,
}

/// Monte-Carlo estimate of the same loss on sampled documents with the
/// attention pattern applied directly to the observed tokens, including
/// the query position itself.
pub fn monte_carlo_loss(levels: AttentionLevels, s: &LandscapeSetting, mc: &McConfig) -> Result<McEstimate> {
    check_setting(s)?;
    if mc.positions == 0 || mc.doc_len == 0 {
        return Err(config_err("Monte-Carlo run needs positive length and position count"));
    }
    if s.masking.p_mask == 0.0 || s.masking.p_keep + s.masking.p_random == 0.0 {
        return Err(config_err("masking never yields a non-mask masked position"));
    }
    let k = wv_constants(&s.masking, s.layout)?;
    let layout = s.layout;
    let vocab = layout.vocab_size();
    let v = layout.words_per_topic;
    let t = layout.num_topics;
    let shift = s.masking.p_mask * s.masking.p_random * k.k3 / (t * v) as f64;
    let cfg = TopicModelConfig::new(layout, TopicPolicy::FixedTau(s.tau), LengthPolicy::Fixed(mc.doc_len), mc.seed)?;
    let mut rng = stream(mc.seed, Domain::Landscape, 0);
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0usize);
    let mut doc_index = 0u64;
    let mut weight = vec![0.0; vocab];
    let mut pred = vec![0.0; vocab];
    let mut topic_mass = vec![0.0; t + 1];
    while count < mc.positions {
        let doc = corpus::nth_document(&cfg, doc_index);
        doc_index += 1;
        let md = mask_document(&doc, &s.masking, layout, &mut rng);
        let mut hist = vec![0.0; vocab];
        for &x in &md.masked {
            hist[x] += 1.0;
        }
        hist[MASK] = 0.0;
        for &j in &md.mask_set {
            let query = md.masked[j];
            if query == MASK {
                continue;
            }
            let label = md.original.tokens[j];
            let qt = (query - 1) / v;
            let mut total = 0.0;
            for w in 1..vocab {
                let level = if w == query {
                    levels.beta
                } else if (w - 1) / v == qt {
                    levels.alpha
                } else {
                    1.0
                };
                weight[w] = hist[w] * level;
                total += weight[w];
            }
            let cell_loss = match s.case {
                BoundsCase::Block => {
                    topic_mass.iter_mut().for_each(|m| *m = 0.0);
                    for w in 1..vocab {
                        topic_mass[(w - 1) / v] += weight[w] / total;
                    }
                    for w in 1..vocab {
                        pred[w] = k.k3 * topic_mass[(w - 1) / v] / v as f64 - shift;
                    }
                    squared_error(&pred, label)
                }
                BoundsCase::Diagonal => {
                    for w in 1..vocab {
                        pred[w] = k.k3 * weight[w] / total;
                    }
                    squared_error(&pred, label)
                }
            };
            sum += cell_loss;
            sum_sq += cell_loss * cell_loss;
            count += 1;
        }
    }
    let n = count as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    let scale = s.masking.p_keep + s.masking.p_random;
    Ok(McEstimate {
        loss: scale * mean,
        se: scale * (var / n).sqrt(),
        positions: count,
    })
}

/// `||pred - e_label||^2` over word coordinates (`pred[0]` is always 0).
fn squared_error(pred: &[f64], label: usize) -> f64 {
    let mut s = 0.0;
    for (w, p) in pred.iter().enumerate().skip(1) {
        let d = if w == label { p - 1.0 } else { *p };
        s += d * d;
    }
    s
}

/// Log-spaced axis from `min` to `max` with `count` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self> {
        if !(min > 0.0 && max >= min && max.is_finite()) || count == 0 {
            return Err(config_err(format!("axis [{min}, {max}] x {count} is not a positive log range")));
        }
        Ok(Self { min, max, count })
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        (0..self.count)
            .map(|k| {
                if k == 0 {
                    self.min
                } else if k + 1 == self.count {
                    self.max
                } else {
                    (lo + (hi - lo) * k as f64 / (self.count - 1) as f64).exp()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub setting: LandscapeSetting,
    pub alpha_axis: AxisSpec,
    pub beta_axis: AxisSpec,
    /// Row-major, alpha outer.
    pub points: Vec<LandscapePoint>,
    pub argmin: usize,
    pub bounds: AttentionBounds,
}

impl LandscapeGrid {
    pub fn at(&self, alpha_index: usize, beta_index: usize) -> &LandscapePoint {
        &self.points[alpha_index * self.beta_axis.count + beta_index]
    }

    pub fn argmin_point(&self) -> &LandscapePoint {
        &self.points[self.argmin]
    }

    pub fn bounds_check(&self) -> bool {
        let p = self.argmin_point();
        self.bounds.contains(p.alpha, p.beta, self.setting.layout.words_per_topic)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let with_mc = self.points.iter().any(|p| p.mc.is_some());
        if with_mc {
            writeln!(out, "alpha,beta,gamma,exact_loss,mc_loss,mc_se")?;
        } else {
            writeln!(out, "alpha,beta,gamma,exact_loss")?;
        }
        for p in &self.points {
            write!(out, "{},{},{},{}", p.alpha, p.beta, p.gamma, p.exact_loss)?;
            if with_mc {
                match p.mc {
                    Some(m) => write!(out, ",{},{}", m.loss, m.se)?,
                    None => write!(out, ",,")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let p = self.argmin_point();
        serde_json::json!({
            "argmin": {"alpha": p.alpha, "beta": p.beta, "gamma": p.gamma, "loss": p.exact_loss},
            "bounds_check": if self.bounds_check() { "pass" } else { "fail" },
            "bounds": self.bounds.to_json(),
        })
    }
}

/// Evaluates every cell (in parallel, stored in grid order) and records the
/// first minimal cell. Monte-Carlo estimates are attached to the listed
/// `(alpha_index, beta_index)` cells when `mc` is given.
pub fn sweep(
    setting: &LandscapeSetting,
    alpha_axis: AxisSpec,
    beta_axis: AxisSpec,
    mc: Option<(&McConfig, &[(usize, usize)])>,
) -> Result<LandscapeGrid> {
    check_setting(setting)?;
    let alphas = alpha_axis.values();
    let betas = beta_axis.values();
    let cells: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
    let mut points = cells
        .par_iter()
        .map(|&(a, b)| evaluate(AttentionLevels::new(a, b)?, setting))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = points.iter().find(|p| !p.exact_loss.is_finite()) {
        return Err(config_err(format!("non-finite loss at alpha = {}, beta = {}", p.alpha, p.beta)));
    }
    if let Some((cfg, spots)) = mc {
        for (n, &(ai, bi)) in spots.iter().enumerate() {
            if ai >= alpha_axis.count || bi >= beta_axis.count {
                return Err(config_err(format!("spot cell ({ai}, {bi}) outside the grid")));
            }
            let idx = ai * beta_axis.count + bi;
            let cell_cfg = McConfig { seed: cfg.seed.wrapping_add(n as u64), ..*cfg };
            let p = &mut points[idx];
            p.mc = Some(monte_carlo_loss(AttentionLevels::new(p.alpha, p.beta)?, setting, &cell_cfg)?);
        }
    }
    let mut argmin = 0;
    for (i, p) in points.iter().enumerate() {
        if p.exact_loss < points[argmin].exact_loss {
            argmin = i;
        }
    }
    let bounds = attention_bounds(&setting.masking, setting.layout, setting.tau, setting.case)?;
    Ok(LandscapeGrid {
        setting: *setting,
        alpha_axis,
        beta_axis,
        points,
        argmin,
        bounds,
    })
}
