#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use topicattn::corpus::{nth_document, Layout, LengthPolicy, TopicModelConfig, TopicPolicy};
use topicattn::loss::{l2_penalty, LossConfig, LossKind};
use topicattn::masking::{mask_document, MaskedDocument, MaskingConfig};
use topicattn::model::{AttentionMode, EmbeddingMode, ModelParams, ModelSpec, TensorId};
use topicattn::optim::document_loss;
use topicattn::rng::{stream, Domain};

pub fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Data loss plus L2 penalty of one masked document.
pub fn objective(p: &ModelParams, doc: &MaskedDocument, loss: &LossConfig) -> f64 {
    document_loss(p, doc, loss).unwrap().0 + l2_penalty(p, loss).0
}

/// Central differences of `objective` with respect to every entry of `id`.
pub fn numeric_gradient(p: &ModelParams, id: TensorId, doc: &MaskedDocument, loss: &LossConfig, h: f64) -> Array2<f64> {
    let base = p.get(id).clone();
    let mut g = Array2::zeros(base.dim());
    let mut q = p.clone();
    for idx in ndarray::indices(base.dim()) {
        let mut t = base.clone();
        t[idx] += h;
        q.set(id, t.clone()).unwrap();
        let up = objective(&q, doc, loss);
        t[idx] -= 2.0 * h;
        q.set(id, t).unwrap();
        let down = objective(&q, doc, loss);
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)` in the Frobenius norm; zero when both
/// are below `floor`.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < floor {
        return 0.0;
    }
    norm(&(a - b)) / scale
}

pub struct Instance {
    pub params: ModelParams,
    pub doc: MaskedDocument,
    pub loss: LossConfig,
}

/// Small random model and masked document. The mode bits of `k` pick
/// embedding, attention, biases and loss kind so that consecutive `k`
/// cover every combination.
pub fn small_instance(k: u64) -> Instance {
    let layout = Layout::new(3, 3).unwrap();
    let mut r = stream(k, Domain::Oracle, 11);
    let mut spec = ModelSpec::new(layout);
    spec.embedding = if k & 1 == 0 { EmbeddingMode::Trained } else { EmbeddingMode::OneHotFrozen };
    spec.attention = if k & 2 == 0 { AttentionMode::Learned } else { AttentionMode::Uniform };
    spec.biases = k & 4 == 0;
    if spec.embedding == EmbeddingMode::Trained {
        spec.d = Some(r.random_range(3..=6));
    }
    spec.d_attn = Some(r.random_range(2..=5));
    spec.sigma0 = 0.6;
    let mut params = ModelParams::init(&spec, k).unwrap();
    // nonzero biases so their gradients are exercised
    for id in [TensorId::KeyBias, TensorId::QueryBias, TensorId::ValueBias, TensorId::PredBias] {
        if !params.is_pinned(id) {
            let dim = params.get(id).dim();
            params.set(id, Array2::from_shape_simple_fn(dim, || r.random_range(-0.3..0.3))).unwrap();
        }
    }
    let kind = if k & 8 == 0 { LossKind::CrossEntropy } else { LossKind::Squared };
    let mut loss = LossConfig::new(kind).with_l2(0.05);
    loss.regularized = vec![TensorId::Value, TensorId::Key];
    let tau = r.random_range(1..=3);
    let cfg = TopicModelConfig::new(layout, TopicPolicy::FixedTau(tau), LengthPolicy::Fixed(8), k).unwrap();
    let masking = MaskingConfig::new(0.5, 0.2, 0.2).unwrap();
    let doc = mask_document(&nth_document(&cfg, 0), &masking, layout, &mut r);
    Instance { params, doc, loss }
}
