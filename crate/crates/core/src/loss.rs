//! Masked-LM losses, the L2 penalty and the exact population loss under
//! uniform attention.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::{Layout, PopulationSpec};
use crate::error::{config_err, Error, Result};
use crate::masking::{masked_distribution, MaskingConfig};
use crate::model::{Gradients, ModelParams, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub l2_lambda: f64,
    pub regularized: Vec<TensorId>,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            l2_lambda: 0.0,
            regularized: vec![TensorId::Value],
        }
    }

    pub fn with_l2(mut self, lambda: f64) -> Self {
        self.l2_lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(config_err("L2 coefficient must be non-negative"));
        }
        Ok(())
    }
}

fn log_sum_exp(y: ArrayView1<'_, f64>) -> f64 {
    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + y.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(y: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = y.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Loss and gradient of a single column against label `label`.
pub fn column_loss(kind: LossKind, y: ArrayView1<'_, f64>, label: usize) -> (f64, Array1<f64>) {
    match kind {
        LossKind::Squared => {
            let mut g = y.to_owned();
            g[label] -= 1.0;
            let l = g.iter().map(|x| x * x).sum();
            (l, g * 2.0)
        }
        LossKind::CrossEntropy => {
            let mut g = softmax(y);
            g[label] -= 1.0;
            (log_sum_exp(y) - y[label], g)
        }
    }
}

/// Mean loss over the columns in `mask_set`; `labels[j]` is the original
/// token at position `j`. The gradient is zero outside the mask set.
pub fn masked_loss(logits: &Array2<f64>, labels: &[usize], mask_set: &[usize], kind: LossKind) -> Result<(f64, Array2<f64>)> {
    if mask_set.is_empty() {
        return Err(Error::Undefined("loss over an empty mask set".into()));
    }
    if labels.len() != logits.ncols() {
        return Err(Error::Shape {
            what: "labels".into(),
            expected: format!("{}", logits.ncols()),
            got: format!("{}", labels.len()),
        });
    }
    let scale = 1.0 / mask_set.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for &j in mask_set {
        let label = labels[j];
        if label >= logits.nrows() {
            return Err(Error::TokenOutOfRange {
                token: label,
                vocab: logits.nrows(),
            });
        }
        let (l, g) = column_loss(kind, logits.column(j), label);
        total += l;
        grad.column_mut(j).assign(&(g * scale));
    }
    Ok((total * scale, grad))
}

/// Loss when every prediction column equals `y` (uniform attention), given
/// the labels at the masked positions. Returns the mean loss and the
/// gradient with respect to `y` summed over the columns.
pub fn shared_column_loss(y: ArrayView1<'_, f64>, labels: &[usize], kind: LossKind) -> Result<(f64, Array1<f64>)> {
    if labels.is_empty() {
        return Err(Error::Undefined("loss over an empty mask set".into()));
    }
    let m = labels.len() as f64;
    let mut q = Array1::<f64>::zeros(y.len());
    for &l in labels {
        if l >= y.len() {
            return Err(Error::TokenOutOfRange { token: l, vocab: y.len() });
        }
        q[l] += 1.0 / m;
    }
    Ok(label_distribution_loss(y, &q, kind))
}

/// Mean loss of a shared prediction `y` against labels with empirical
/// distribution `q`, and its gradient with respect to `y`.
pub fn label_distribution_loss(y: ArrayView1<'_, f64>, q: &Array1<f64>, kind: LossKind) -> (f64, Array1<f64>) {
    match kind {
        LossKind::Squared => {
            let yy: f64 = y.iter().map(|x| x * x).sum();
            let loss = yy - 2.0 * y.dot(q) + 1.0;
            (loss, (&y - q) * 2.0)
        }
        LossKind::CrossEntropy => {
            let loss = log_sum_exp(y) - y.dot(q);
            (loss, softmax(y) - q)
        }
    }
}

/// `lambda * sum ||theta||_F^2` over the regularized tensors, with gradient
/// `2 lambda theta`.
pub fn l2_penalty(params: &ModelParams, cfg: &LossConfig) -> (f64, Gradients) {
    let mut g = Gradients::empty();
    if cfg.l2_lambda == 0.0 {
        return (0.0, g);
    }
    let mut total = 0.0;
    for &id in &cfg.regularized {
        let t = params.get(id);
        total += t.iter().map(|x| x * x).sum::<f64>();
        g.0[id.index()] = Some(t * (2.0 * cfg.l2_lambda));
    }
    (cfg.l2_lambda * total, g)
}

/// Expected observed-token histogram of a long document on `topic_set`
/// after masking (index 0 is the mask token).
pub fn expected_histogram(cfg: &MaskingConfig, layout: Layout, topic_set: &[usize]) -> Result<Array1<f64>> {
    let stats = masked_distribution(cfg, layout, topic_set.len())?;
    let mut h = Array1::from_elem(layout.vocab_size(), stats.p_out);
    h[0] = stats.p_mask;
    for &t in topic_set {
        for w in layout.topic_words(t) {
            h[w] = stats.p_in;
        }
    }
    Ok(h)
}

/// Exact expected squared loss of `pred = W h + b_pred` for documents on a
/// fixed topic set, with `h` the expected masked histogram. Labels are
/// uniform over the set's words; every coordinate (including the mask row)
/// enters the squared norm.
pub fn population_loss_uniform_attention(
    w: &Array2<f64>,
    b_pred: &Array1<f64>,
    topic_set: &[usize],
    masking: &MaskingConfig,
    layout: Layout,
    kind: LossKind,
) -> Result<f64> {
    Ok(population_loss_and_grad(w, b_pred, topic_set, masking, layout, kind)?.0)
}

/// Population loss together with its gradient with respect to `W`.
pub fn population_loss_and_grad(
    w: &Array2<f64>,
    b_pred: &Array1<f64>,
    topic_set: &[usize],
    masking: &MaskingConfig,
    layout: Layout,
    kind: LossKind,
) -> Result<(f64, Array2<f64>)> {
    if kind != LossKind::Squared {
        return Err(Error::Unsupported(
            "population loss is only available in closed form for the squared loss".into(),
        ));
    }
    let vocab = layout.vocab_size();
    if w.dim() != (vocab, vocab) || b_pred.len() != vocab {
        return Err(Error::Shape {
            what: "W / b_pred".into(),
            expected: format!("({vocab}, {vocab}) / {vocab}"),
            got: format!("{:?} / {}", w.dim(), b_pred.len()),
        });
    }
    let p = PopulationSpec::new(layout, topic_set)?;
    let h = expected_histogram(masking, layout, topic_set)?;
    let pred = w.dot(&h) + b_pred;
    let pw = Array1::from(p.probs);
    // sum_i p(i) ||pred - e_i||^2 = ||pred||^2 - 2 p . pred + 1
    let loss = pred.dot(&pred) - 2.0 * pw.dot(&pred) + 1.0;
    let r = (&pred - &pw) * 2.0;
    let mut grad = Array2::zeros((vocab, vocab));
    for (i, ri) in r.iter().enumerate() {
        grad.row_mut(i).assign(&(&h * *ri));
    }
    Ok((loss, grad))
}

/// Average of the population loss (and gradient) over topic sets.
pub fn average_population_loss(
    w: &Array2<f64>,
    b_pred: &Array1<f64>,
    subsets: &[Vec<usize>],
    masking: &MaskingConfig,
    layout: Layout,
) -> Result<(f64, Array2<f64>)> {
    if subsets.is_empty() {
        return Err(config_err("no topic subsets"));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros(w.dim());
    for s in subsets {
        let (l, g) = population_loss_and_grad(w, b_pred, s, masking, layout, LossKind::Squared)?;
        total += l;
        grad += &g;
    }
    let n = subsets.len() as f64;
    Ok((total / n, grad / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec};

    #[test]
    fn squared_examples() {
        let y = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let (l, g) = masked_loss(&y, &[1, 2], &[0], LossKind::Squared).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let (l, _) = masked_loss(&y, &[1, 2], &[1], LossKind::Squared).unwrap();
        assert_eq!(l, 1.0);
        assert!(masked_loss(&y, &[1, 2], &[], LossKind::Squared).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let y = Array2::from_elem((7, 3), 0.4);
        let (l, g) = masked_loss(&y, &[1, 2, 3], &[0, 2], LossKind::CrossEntropy).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);
        assert!(g.column(1).iter().all(|x| *x == 0.0));
        assert!(g.column(0).sum().abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let y = Array2::from_shape_vec((2, 1), vec![1000.0, 0.0]).unwrap();
        let (l, _) = masked_loss(&y, &[1], &[0], LossKind::CrossEntropy).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn shared_column_matches_columnwise() {
        let y = Array1::from(vec![0.3, -1.2, 0.5, 2.0, 0.1]);
        let labels = [1usize, 3, 3, 4];
        for kind in [LossKind::Squared, LossKind::CrossEntropy] {
            let logits = Array2::from_shape_fn((5, 4), |(i, _)| y[i]);
            let (l1, g1) = masked_loss(&logits, &labels, &[0, 1, 2, 3], kind).unwrap();
            let (l2, g2) = shared_column_loss(y.view(), &labels, kind).unwrap();
            assert!((l1 - l2).abs() < 1e-14);
            let g1s = g1.sum_axis(ndarray::Axis(1));
            for (a, b) in g1s.iter().zip(g2.iter()) {
                assert!((a - b * 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn l2_examples() {
        let layout = Layout::new(1, 1).unwrap();
        let mut p = ModelParams::init(&ModelSpec::new(layout), 0).unwrap();
        let cfg = LossConfig::new(LossKind::Squared);
        assert_eq!(l2_penalty(&p, &cfg).0, 0.0);
        p.set(TensorId::Value, Array2::ones((2, 2))).unwrap();
        let (v, g) = l2_penalty(&p, &cfg.clone().with_l2(0.5));
        assert_eq!(v, 2.0);
        assert_eq!(g.get(TensorId::Value).unwrap(), &Array2::from_elem((2, 2), 1.0));
    }

    #[test]
    fn l2_gradient_matches_differences() {
        let layout = Layout::new(2, 2).unwrap();
        let p = ModelParams::init(&ModelSpec::new(layout), 3).unwrap();
        let cfg = LossConfig::new(LossKind::Squared).with_l2(0.37);
        let (_, g) = l2_penalty(&p, &cfg);
        let g = g.get(TensorId::Value).unwrap();
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 3), (4, 2)] {
            let mut plus = p.clone();
            let mut w = plus.get(TensorId::Value).clone();
            w[[i, j]] += h;
            plus.set(TensorId::Value, w).unwrap();
            let mut minus = p.clone();
            let mut w = minus.get(TensorId::Value).clone();
            w[[i, j]] -= h;
            minus.set(TensorId::Value, w).unwrap();
            let fd = (l2_penalty(&plus, &cfg).0 - l2_penalty(&minus, &cfg).0) / (2.0 * h);
            assert!((fd - g[[i, j]]).abs() < 1e-7);
        }
    }

    #[test]
    fn population_loss_trivial_case() {
        let layout = Layout::new(1, 1).unwrap();
        let l = population_loss_uniform_attention(&Array2::zeros((2, 2)), &Array1::zeros(2), &[1], &MaskingConfig::default(), layout, LossKind::Squared).unwrap();
        assert_eq!(l, 1.0);
        assert!(population_loss_uniform_attention(&Array2::zeros((2, 2)), &Array1::zeros(2), &[1], &MaskingConfig::default(), layout, LossKind::CrossEntropy).is_err());
    }
}
