//! Structure diagnostics on trained matrices and attention.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Layout;
use crate::error::{config_err, Error, Result};
use crate::masking::{MaskedDocument, MASK};
use crate::model::{forward, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    /// Same-topic entries off the diagonal.
    pub same_topic_mean: f64,
    pub diff_topic_mean: f64,
    pub same_topic_std: f64,
    pub diff_topic_std: f64,
    /// `(same - diff) / diff_std`; `+inf` (`-inf`) when the diff-topic class
    /// is constant and the means differ, 0 when they coincide.
    pub separation: f64,
    pub diagonal_mean: f64,
    pub same_topic_zero_variance: bool,
    pub diff_topic_zero_variance: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relative scale under which a spread counts as zero.
const ZERO_SPREAD: f64 = 1e-12;

pub fn block_report(m: &Array2<f64>, layout: Layout) -> Result<BlockReport> {
    let vocab = layout.vocab_size();
    if m.dim() != (vocab, vocab) {
        return Err(Error::Shape {
            what: "M".into(),
            expected: format!("({vocab}, {vocab})"),
            got: format!("{:?}", m.dim()),
        });
    }
    let v = layout.words_per_topic;
    let (mut same, mut diff, mut diag) = (Vec::new(), Vec::new(), Vec::new());
    for i in 1..vocab {
        for j in 1..vocab {
            let x = m[[i, j]];
            if i == j {
                diag.push(x);
            } else if (i - 1) / v == (j - 1) / v {
                same.push(x);
            } else {
                diff.push(x);
            }
        }
    }
    let (sm, ss) = mean_std(&same);
    let (dm, ds) = mean_std(&diff);
    let scale = m.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(f64::MIN_POSITIVE);
    let same_zero = same.is_empty() || ss <= ZERO_SPREAD * scale;
    let diff_zero = diff.is_empty() || ds <= ZERO_SPREAD * scale;
    let gap = sm - dm;
    let separation = if diff_zero {
        if gap.abs() <= ZERO_SPREAD * scale {
            0.0
        } else {
            gap.signum() * f64::INFINITY
        }
    } else {
        gap / ds
    };
    Ok(BlockReport {
        same_topic_mean: sm,
        diff_topic_mean: dm,
        same_topic_std: ss,
        diff_topic_std: ds,
        separation,
        diagonal_mean: mean_std(&diag).0,
        same_topic_zero_variance: same_zero,
        diff_topic_zero_variance: diff_zero,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionClass {
    SameWord,
    SameTopicDiffWord,
    DiffTopic,
}

/// Class of the (source, query) token pair; `None` if either is the mask.
pub fn attention_class(source: usize, query: usize, layout: Layout) -> Option<AttentionClass> {
    if source == MASK || query == MASK {
        return None;
    }
    let v = layout.words_per_topic;
    Some(if source == query {
        AttentionClass::SameWord
    } else if (source - 1) / v == (query - 1) / v {
        AttentionClass::SameTopicDiffWord
    } else {
        AttentionClass::DiffTopic
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAverage {
    /// Absent for an empty class.
    pub mean: Option<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionClassReport {
    pub avg_same_word: ClassAverage,
    pub avg_same_topic_diff_word: ClassAverage,
    pub avg_diff_topic: ClassAverage,
    pub debiased: bool,
}

impl AttentionClassReport {
    pub fn total_pairs(&self) -> u64 {
        self.avg_same_word.count + self.avg_same_topic_diff_word.count + self.avg_diff_topic.count
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: [f64; 3],
    count: [u64; 3],
}

impl Acc {
    fn merge(mut self, o: Acc) -> Acc {
        for k in 0..3 {
            self.sum[k] += o.sum[k];
            self.count[k] += o.count[k];
        }
        self
    }
}

fn accumulate(tokens: &[usize], a: &Array2<f64>, debias: bool, layout: Layout) -> Result<Acc> {
    let n = tokens.len();
    if a.dim() != (n, n) {
        return Err(Error::Shape {
            what: "A".into(),
            expected: format!("({n}, {n})"),
            got: format!("{:?}", a.dim()),
        });
    }
    let scale = if debias { n as f64 / 100.0 } else { 1.0 };
    let mut acc = Acc::default();
    for i in 0..n {
        for j in 0..n {
            if let Some(c) = attention_class(tokens[i], tokens[j], layout) {
                let k = c as usize;
                acc.sum[k] += a[[i, j]] * scale;
                acc.count[k] += 1;
            }
        }
    }
    Ok(acc)
}

fn finish(acc: Acc, debiased: bool) -> AttentionClassReport {
    let avg = |k: usize| ClassAverage {
        mean: (acc.count[k] > 0).then(|| acc.sum[k] / acc.count[k] as f64),
        count: acc.count[k],
    };
    AttentionClassReport {
        avg_same_word: avg(0),
        avg_same_topic_diff_word: avg(1),
        avg_diff_topic: avg(2),
        debiased,
    }
}

/// Class averages over explicit attention matrices, one per observed
/// token sequence.
pub fn attention_class_report_explicit(docs: &[(Vec<usize>, Array2<f64>)], layout: Layout, debias: bool) -> Result<AttentionClassReport> {
    if docs.is_empty() {
        return Err(config_err("attention report needs at least one document"));
    }
    let mut acc = Acc::default();
    for (tokens, a) in docs {
        acc = acc.merge(accumulate(tokens, a, debias, layout)?);
    }
    Ok(finish(acc, debias))
}

/// Class averages of the model's attention on masked documents, classified
/// by the observed tokens.
pub fn attention_class_report(params: &ModelParams, docs: &[MaskedDocument], debias: bool) -> Result<AttentionClassReport> {
    if docs.is_empty() {
        return Err(config_err("attention report needs at least one document"));
    }
    let parts: Vec<Result<Acc>> = docs
        .par_iter()
        .map(|d| {
            let a = forward(params, &d.masked)?.attention();
            accumulate(&d.masked, &a, debias, params.layout)
        })
        .collect();
    let mut acc = Acc::default();
    for p in parts {
        acc = acc.merge(p?);
    }
    Ok(finish(acc, debias))
}

/// Cosine distance `(1 - cos) / 2` between flattened matrices; a zero
/// matrix against a nonzero one has cosine 0.
pub fn rotation_metric(now: &Array2<f64>, past: &Array2<f64>) -> Result<f64> {
    if now.dim() != past.dim() {
        return Err(Error::Shape {
            what: "W_past".into(),
            expected: format!("{:?}", now.dim()),
            got: format!("{:?}", past.dim()),
        });
    }
    let na = now.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = past.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return Err(Error::Undefined("rotation between two zero matrices".into()));
    }
    let cos = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (now.iter().zip(past.iter()).map(|(a, b)| a * b).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
    };
    Ok((1.0 - cos) / 2.0)
}

/// Writes a matrix as CSV rows for heatmaps.
pub fn write_matrix_csv<W: std::io::Write>(out: &mut W, m: &Array2<f64>) -> Result<()> {
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::optimal_wv_l2;
    use crate::corpus::{LengthPolicy, TopicModelConfig, TopicPolicy};
    use crate::masking::{mask_document, MaskingConfig};
    use crate::model::{AttentionMode, ModelSpec};
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;

    fn l(t: usize, v: usize) -> Layout {
        Layout::new(t, v).unwrap()
    }

    #[test]
    fn block_report_of_optimum() {
        let w = optimal_wv_l2(&MaskingConfig::default(), l(10, 10)).unwrap();
        let r = block_report(&w, l(10, 10)).unwrap();
        assert!(r.diff_topic_zero_variance && r.same_topic_zero_variance);
        assert_eq!(r.separation, f64::INFINITY);
        assert!((r.same_topic_mean - 0.108020).abs() < 1e-6);
    }

    #[test]
    fn block_report_of_identity() {
        let r = block_report(&Array2::eye(10), l(3, 3)).unwrap();
        assert_eq!(r.same_topic_mean, 0.0);
        assert_eq!(r.diff_topic_mean, 0.0);
        assert_eq!(r.diagonal_mean, 1.0);
        assert_eq!(r.separation, 0.0);
        assert!(block_report(&Array2::eye(9), l(3, 3)).is_err());
    }

    fn uniform_docs(n_docs: usize, lengths: LengthPolicy) -> (Layout, Vec<MaskedDocument>) {
        let layout = l(4, 3);
        let cfg = TopicModelConfig::new(layout, TopicPolicy::FixedTau(2), lengths, 5).unwrap();
        let docs = crate::corpus::generate(&cfg, n_docs);
        let mut rng = stream(5, Domain::Masking, 0);
        let m = docs.iter().map(|d| mask_document(d, &MaskingConfig::default(), layout, &mut rng)).collect();
        (layout, m)
    }

    #[test]
    fn uniform_attention_classes() {
        let (layout, docs) = uniform_docs(6, LengthPolicy::UniformRange { min: 20, max: 70 });
        let mut spec = ModelSpec::new(layout);
        spec.attention = AttentionMode::Uniform;
        let p = ModelParams::init(&spec, 1).unwrap();
        let r = attention_class_report(&p, &docs, true).unwrap();
        for c in [r.avg_same_word, r.avg_same_topic_diff_word, r.avg_diff_topic] {
            assert!((c.mean.unwrap() - 0.01).abs() < 1e-15);
        }
        let expected: u64 = docs.iter().map(|d| d.masked.iter().filter(|&&t| t != MASK).count().pow(2) as u64).sum();
        assert_eq!(r.total_pairs(), expected);

        let (layout, docs) = uniform_docs(3, LengthPolicy::Fixed(40));
        let p = ModelParams::init(&ModelSpec { attention: AttentionMode::Uniform, ..ModelSpec::new(layout) }, 1).unwrap();
        let r = attention_class_report(&p, &docs, false).unwrap();
        assert!((r.avg_diff_topic.mean.unwrap() - 1.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn empty_class_has_no_mean() {
        let layout = l(2, 2);
        let r = attention_class_report_explicit(&[(vec![1, 1], Array2::from_elem((2, 2), 0.5))], layout, false).unwrap();
        assert_eq!(r.avg_diff_topic, ClassAverage { mean: None, count: 0 });
        assert_eq!(r.avg_same_word.count, 4);
        assert!(attention_class_report_explicit(&[], layout, false).is_err());
    }

    #[test]
    fn rotation_examples() {
        let w = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        assert!(rotation_metric(&w, &w).unwrap().abs() < 1e-15);
        assert!((rotation_metric(&w, &(-&w)).unwrap() - 1.0).abs() < 1e-15);
        let a = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let b = Array2::from_shape_vec((1, 2), vec![0.0, 3.0]).unwrap();
        assert_eq!(rotation_metric(&a, &b).unwrap(), 0.5);
        assert_eq!(rotation_metric(&a, &Array2::zeros((1, 2))).unwrap(), 0.5);
        assert!(rotation_metric(&Array2::zeros((1, 2)), &Array2::zeros((1, 2))).is_err());
    }

    fn within_topic_permutation(layout: Layout, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut rng = stream(seed, Domain::Analysis, 0);
        let mut perm: Vec<usize> = (0..layout.vocab_size()).collect();
        for t in 1..=layout.num_topics {
            let r = layout.topic_words(t);
            perm[*r.start()..=*r.end()].shuffle(&mut rng);
        }
        perm
    }

    proptest! {
        #[test]
        fn block_report_is_permutation_invariant(seed in 0u64..1000, t in 1usize..4, v in 1usize..4) {
            let layout = l(t, v);
            let n = layout.vocab_size();
            let mut rng = stream(seed, Domain::Analysis, 1);
            use rand::Rng;
            let m = Array2::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0));
            let perm = within_topic_permutation(layout, seed);
            let pm = Array2::from_shape_fn((n, n), |(i, j)| m[[perm[i], perm[j]]]);
            let a = block_report(&m, layout).unwrap();
            let b = block_report(&pm, layout).unwrap();
            for (x, y) in [(a.same_topic_mean, b.same_topic_mean), (a.diff_topic_mean, b.diff_topic_mean), (a.diagonal_mean, b.diagonal_mean), (a.diff_topic_std, b.diff_topic_std)] {
                prop_assert!((x.is_nan() && y.is_nan()) || (x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn class_counts_partition_pairs(tokens in proptest::collection::vec(0usize..10, 1..30)) {
            let layout = l(3, 3);
            let n = tokens.len();
            let a = Array2::from_elem((n, n), 1.0 / n as f64);
            let r = attention_class_report_explicit(&[(tokens.clone(), a)], layout, true).unwrap();
            let valid = tokens.iter().filter(|&&t| t != 0).count() as u64;
            prop_assert_eq!(r.total_pairs(), valid * valid);
        }
    }
}
