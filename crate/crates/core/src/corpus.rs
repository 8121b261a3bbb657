//! Synthetic documents from a disjoint-topic model.
//!
//! Words are numbered `1..=T*v`; word `i` belongs to topic `ceil(i / v)`.
//! Index 0 is the mask token and never appears in a clean document.

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{self, Domain};

pub const DEFAULT_SUBSET_CAP: usize = 1_000_000;

/// Shape of the vocabulary: `T` disjoint topics of `v` words each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub num_topics: usize,
    pub words_per_topic: usize,
}

impl Layout {
    pub fn new(num_topics: usize, words_per_topic: usize) -> Result<Self> {
        if num_topics == 0 || words_per_topic == 0 {
            return Err(config_err("T and v must be positive"));
        }
        Ok(Self {
            num_topics,
            words_per_topic,
        })
    }

    /// Number of real words, `T*v`.
    pub fn num_words(&self) -> usize {
        self.num_topics * self.words_per_topic
    }

    /// Vocabulary size including the mask token.
    pub fn vocab_size(&self) -> usize {
        self.num_words() + 1
    }

    pub fn topic_of(&self, word: usize) -> Result<usize> {
        if word > self.num_words() {
            return Err(Error::TokenOutOfRange {
                token: word,
                vocab: self.vocab_size(),
            });
        }
        topic_of(word, self.words_per_topic)
    }

    /// Words of topic `t` (1-based).
    pub fn topic_words(&self, t: usize) -> std::ops::RangeInclusive<usize> {
        let v = self.words_per_topic;
        (t - 1) * v + 1..=t * v
    }
}

pub fn topic_of(word: usize, v: usize) -> Result<usize> {
    if word == 0 {
        return Err(Error::Undefined("the mask token has no topic".into()));
    }
    Ok(word.div_ceil(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TopicPolicy {
    FixedTau(usize),
    Dirichlet(f64),
}

impl fmt::Display for TopicPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopicPolicy::FixedTau(t) => write!(f, "fixed-tau({t})"),
            TopicPolicy::Dirichlet(a) => write!(f, "dirichlet({a})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthPolicy {
    Fixed(usize),
    UniformRange { min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicModelConfig {
    pub layout: Layout,
    pub topics: TopicPolicy,
    pub length: LengthPolicy,
    pub seed: u64,
}

impl TopicModelConfig {
    pub fn new(layout: Layout, topics: TopicPolicy, length: LengthPolicy, seed: u64) -> Result<Self> {
        let cfg = Self {
            layout,
            topics,
            length,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Layout::new(self.layout.num_topics, self.layout.words_per_topic)?;
        match self.topics {
            TopicPolicy::FixedTau(tau) if tau == 0 || tau > self.layout.num_topics => {
                return Err(config_err(format!(
                    "tau = {tau} must lie in [1, T = {}]",
                    self.layout.num_topics
                )))
            }
            TopicPolicy::Dirichlet(a) if !(a.is_finite() && a > 0.0) => {
                return Err(config_err(format!("Dirichlet concentration {a} must be positive")))
            }
            _ => {}
        }
        match self.length {
            LengthPolicy::Fixed(0) => return Err(config_err("document length must be positive")),
            LengthPolicy::UniformRange { min, max } if min == 0 || min > max => {
                return Err(config_err(format!("length range [{min}, {max}] is invalid")))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<usize>,
    /// Sorted, 1-based topic indices.
    pub topic_set: Vec<usize>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn sample_length<R: Rng + ?Sized>(policy: LengthPolicy, rng: &mut R) -> usize {
    match policy {
        LengthPolicy::Fixed(n) => n,
        LengthPolicy::UniformRange { min, max } => rng.random_range(min..=max),
    }
}

/// `k` distinct values from `1..=n`, sorted (partial Fisher-Yates).
fn choose_distinct<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = (1..=n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

fn dirichlet_weights<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // small concentrations can underflow every component
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Per-topic word-choice weights of one document (index `t - 1`), drawn the
/// same way `sample_document` draws them.
pub fn sample_topic_weights<R: Rng + ?Sized>(cfg: &TopicModelConfig, rng: &mut R) -> Vec<f64> {
    let t_count = cfg.layout.num_topics;
    match cfg.topics {
        TopicPolicy::FixedTau(tau) => {
            let mut w = vec![0.0; t_count];
            for t in choose_distinct(t_count, tau, rng) {
                w[t - 1] = 1.0 / tau as f64;
            }
            w
        }
        TopicPolicy::Dirichlet(alpha) => dirichlet_weights(alpha, t_count, rng),
    }
}

pub fn sample_document<R: Rng + ?Sized>(cfg: &TopicModelConfig, rng: &mut R) -> Document {
    let v = cfg.layout.words_per_topic;
    let n = sample_length(cfg.length, rng);
    let word_in = |t: usize, rng: &mut R| (t - 1) * v + rng.random_range(1..=v);
    match cfg.topics {
        TopicPolicy::FixedTau(tau) => {
            let topic_set = choose_distinct(cfg.layout.num_topics, tau, rng);
            let tokens = (0..n)
                .map(|_| {
                    let t = topic_set[rng.random_range(0..tau)];
                    word_in(t, rng)
                })
                .collect();
            Document { tokens, topic_set }
        }
        TopicPolicy::Dirichlet(alpha) => {
            let weights = dirichlet_weights(alpha, cfg.layout.num_topics, rng);
            let mut used = vec![false; cfg.layout.num_topics + 1];
            let tokens = (0..n)
                .map(|_| {
                    let t = sample_categorical(&weights, rng) + 1;
                    used[t] = true;
                    word_in(t, rng)
                })
                .collect();
            let topic_set = (1..=cfg.layout.num_topics).filter(|t| used[*t]).collect();
            Document { tokens, topic_set }
        }
    }
}

/// Document `index` of the corpus defined by `cfg`; each index owns a stream.
pub fn nth_document(cfg: &TopicModelConfig, index: u64) -> Document {
    let mut r = rng::stream(cfg.seed, Domain::Corpus, index);
    sample_document(cfg, &mut r)
}

pub fn generate(cfg: &TopicModelConfig, count: usize) -> Vec<Document> {
    (0..count as u64).map(|i| nth_document(cfg, i)).collect()
}

pub fn one_hot_encode(tokens: &[usize], layout: Layout) -> Result<Array2<f64>> {
    let vocab = layout.vocab_size();
    let mut x = Array2::zeros((vocab, tokens.len()));
    for (j, &tok) in tokens.iter().enumerate() {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab });
        }
        x[[tok, j]] = 1.0;
    }
    Ok(x)
}

pub fn decode(x: &Array2<f64>) -> Result<Vec<usize>> {
    x.columns()
        .into_iter()
        .enumerate()
        .map(|(j, col)| {
            let hot: Vec<usize> = col.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
            match hot.as_slice() {
                [i] if col[*i] == 1.0 => Ok(*i),
                _ => Err(Error::Shape {
                    what: format!("column {j}"),
                    expected: "a single 1".into(),
                    got: format!("{} nonzero entries", hot.len()),
                }),
            }
        })
        .collect()
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All `tau`-subsets of `1..=T` in lexicographic order.
pub fn enumerate_topic_subsets(num_topics: usize, tau: usize, cap: usize) -> Result<Vec<Vec<usize>>> {
    if tau == 0 || tau > num_topics {
        return Err(config_err(format!("tau = {tau} must lie in [1, T = {num_topics}]")));
    }
    let count = binomial(num_topics, tau);
    if count > cap as u128 {
        return Err(Error::EnumerationTooLarge { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cur: Vec<usize> = (1..=tau).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..tau).rev().find(|&i| cur[i] < num_topics - tau + i + 1) else {
            break;
        };
        cur[i] += 1;
        for k in i + 1..tau {
            cur[k] = cur[k - 1] + 1;
        }
    }
    Ok(out)
}

/// Population of documents on a fixed topic set: words uniform over the
/// topics of the set.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub topic_set: Vec<usize>,
    /// Indexed by word, entry 0 (mask) is always 0.
    pub probs: Vec<f64>,
}

impl PopulationSpec {
    pub fn new(layout: Layout, topic_set: &[usize]) -> Result<Self> {
        if topic_set.is_empty() {
            return Err(config_err("topic set must be non-empty"));
        }
        let mut probs = vec![0.0; layout.vocab_size()];
        let p = 1.0 / (topic_set.len() * layout.words_per_topic) as f64;
        for &t in topic_set {
            if t == 0 || t > layout.num_topics {
                return Err(config_err(format!("topic {t} outside [1, {}]", layout.num_topics)));
            }
            for w in layout.topic_words(t) {
                probs[w] = p;
            }
        }
        Ok(Self {
            topic_set: topic_set.to_vec(),
            probs,
        })
    }
}

pub fn write_corpus<W: Write>(out: &mut W, cfg: &TopicModelConfig, docs: &[Document]) -> Result<()> {
    writeln!(
        out,
        "#T={},v={},policy={},seed={}",
        cfg.layout.num_topics, cfg.layout.words_per_topic, cfg.topics, cfg.seed
    )?;
    for d in docs {
        write_tokens(out, &d.tokens)?;
    }
    Ok(())
}

pub(crate) fn write_tokens<W: Write>(out: &mut W, tokens: &[usize]) -> Result<()> {
    let line: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    writeln!(out, "{}", line.join(" "))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub layout: Layout,
    pub policy: String,
    pub seed: u64,
}

pub(crate) fn parse_tokens(line: &str, lineno: usize, source_name: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|s| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                source_name: source_name.into(),
                line: lineno,
                msg: format!("bad token {s:?}: {e}"),
            })
        })
        .collect()
}

fn parse_header(line: &str, source_name: &str) -> Result<CorpusHeader> {
    let bad = |msg: String| Error::Parse {
        source_name: source_name.into(),
        line: 1,
        msg,
    };
    let body = line.strip_prefix('#').ok_or_else(|| bad("missing '#' header".into()))?;
    let (mut t, mut v, mut policy, mut seed) = (None, None, None, None);
    for field in body.split(',') {
        let (k, val) = field.split_once('=').ok_or_else(|| bad(format!("bad header field {field:?}")))?;
        match k.trim() {
            "T" => t = val.trim().parse().ok(),
            "v" => v = val.trim().parse().ok(),
            "policy" => policy = Some(val.trim().to_string()),
            "seed" => seed = val.trim().parse().ok(),
            _ => {}
        }
    }
    match (t, v, policy, seed) {
        (Some(t), Some(v), Some(policy), Some(seed)) => Ok(CorpusHeader {
            layout: Layout::new(t, v)?,
            policy,
            seed,
        }),
        _ => Err(bad("header needs T, v, policy and seed".into())),
    }
}

/// Reads a corpus file, checking every token against the header's layout.
/// Topic sets are reconstructed from the tokens.
pub fn read_corpus<R: BufRead>(input: R, source_name: &str) -> Result<(CorpusHeader, Vec<Document>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Parse {
        source_name: source_name.into(),
        line: 1,
        msg: "empty file".into(),
    })??;
    let header = parse_header(&first, source_name)?;
    let mut docs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = parse_tokens(&line, i + 2, source_name)?;
        let mut topic_set = Vec::new();
        for &tok in &tokens {
            if tok == 0 {
                return Err(Error::Parse {
                    source_name: source_name.into(),
                    line: i + 2,
                    msg: "mask token in a clean document".into(),
                });
            }
            topic_set.push(header.layout.topic_of(tok)?);
        }
        topic_set.sort_unstable();
        topic_set.dedup();
        docs.push(Document { tokens, topic_set });
    }
    Ok((header, docs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(t: usize, v: usize) -> Layout {
        Layout::new(t, v).unwrap()
    }

    #[test]
    fn topic_of_examples() {
        assert_eq!(topic_of(1, 10).unwrap(), 1);
        assert_eq!(topic_of(10, 10).unwrap(), 1);
        assert_eq!(topic_of(11, 10).unwrap(), 2);
        assert_eq!(topic_of(95, 10).unwrap(), 10);
        assert!(matches!(topic_of(0, 10), Err(Error::Undefined(_))));
        assert!(layout(2, 3).topic_of(7).is_err());
    }

    #[test]
    fn config_validation() {
        let l = layout(4, 3);
        assert!(TopicModelConfig::new(l, TopicPolicy::FixedTau(0), LengthPolicy::Fixed(5), 0).is_err());
        assert!(TopicModelConfig::new(l, TopicPolicy::FixedTau(5), LengthPolicy::Fixed(5), 0).is_err());
        assert!(TopicModelConfig::new(l, TopicPolicy::Dirichlet(0.0), LengthPolicy::Fixed(5), 0).is_err());
        assert!(TopicModelConfig::new(l, TopicPolicy::FixedTau(2), LengthPolicy::UniformRange { min: 4, max: 3 }, 0).is_err());
        assert!(TopicModelConfig::new(l, TopicPolicy::FixedTau(2), LengthPolicy::UniformRange { min: 0, max: 3 }, 0).is_err());
        assert!(TopicModelConfig::new(l, TopicPolicy::FixedTau(4), LengthPolicy::Fixed(1), 0).is_ok());
    }

    #[test]
    fn single_topic_documents() {
        let cfg = TopicModelConfig::new(layout(2, 3), TopicPolicy::FixedTau(1), LengthPolicy::Fixed(20), 5).unwrap();
        for d in generate(&cfg, 50) {
            let lo = d.tokens.iter().all(|t| (1..=3).contains(t));
            let hi = d.tokens.iter().all(|t| (4..=6).contains(t));
            assert!(lo || hi);
        }
    }

    #[test]
    fn in_topic_frequency_matches_uniform() {
        // each in-topic word has probability 1/(tau*v) = 1/20
        let n = 100_000;
        let cfg = TopicModelConfig::new(layout(10, 10), TopicPolicy::FixedTau(2), LengthPolicy::Fixed(n), 11).unwrap();
        let d = nth_document(&cfg, 0);
        let mut counts = vec![0usize; 101];
        for &t in &d.tokens {
            counts[t] += 1;
        }
        let p = 1.0 / 20.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for t in &d.topic_set {
            for w in cfg.layout.topic_words(*t) {
                let f = counts[w] as f64 / n as f64;
                assert!((f - p).abs() < 3.5 * se, "word {w}: {f} vs {p}");
            }
        }
        let outside: usize = (1..=100).filter(|w| !d.topic_set.contains(&topic_of(*w, 10).unwrap())).map(|w| counts[w]).sum();
        assert_eq!(outside, 0);
    }

    #[test]
    fn dirichlet_topic_counts_are_mostly_small() {
        let cfg = TopicModelConfig::new(layout(10, 10), TopicPolicy::Dirichlet(0.1), LengthPolicy::UniformRange { min: 20, max: 40 }, 3).unwrap();
        let mut hist = [0usize; 11];
        for d in generate(&cfg, 10_000) {
            hist[d.topic_set.len()] += 1;
        }
        let mode = (0..=10).max_by_key(|k| hist[*k]).unwrap();
        assert!((2..=4).contains(&mode), "histogram {hist:?}");
    }

    #[test]
    fn fixed_tau_topics_all_appear_for_long_documents() {
        let (t, v, tau) = (6, 4, 3);
        let n = 100 * tau * v;
        let cfg = TopicModelConfig::new(layout(t, v), TopicPolicy::FixedTau(tau), LengthPolicy::Fixed(n), 21).unwrap();
        let mut failures = 0;
        for d in generate(&cfg, 200) {
            let mut seen: Vec<usize> = d.tokens.iter().map(|w| topic_of(*w, v).unwrap()).collect();
            seen.sort_unstable();
            seen.dedup();
            assert!(seen.iter().all(|s| d.topic_set.contains(s)));
            if seen != d.topic_set {
                failures += 1;
            }
        }
        assert!(failures < 2);
    }

    #[test]
    fn one_hot_examples() {
        let x = one_hot_encode(&[1], layout(1, 1)).unwrap();
        assert_eq!(x.dim(), (2, 1));
        assert_eq!(x[[1, 0]], 1.0);
        let y = one_hot_encode(&[3, 3], layout(2, 2)).unwrap();
        assert_eq!(y.column(0), y.column(1));
        assert!(one_hot_encode(&[5], layout(2, 2)).is_err());
    }

    #[test]
    fn subset_enumeration() {
        assert_eq!(enumerate_topic_subsets(3, 3, DEFAULT_SUBSET_CAP).unwrap(), vec![vec![1, 2, 3]]);
        let s = enumerate_topic_subsets(4, 2, DEFAULT_SUBSET_CAP).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s[0], vec![1, 2]);
        assert_eq!(s[5], vec![3, 4]);
        // C(10,3) = 10*9*8/6
        assert_eq!(enumerate_topic_subsets(10, 3, DEFAULT_SUBSET_CAP).unwrap().len(), 10 * 9 * 8 / 6);
        assert!(matches!(enumerate_topic_subsets(100, 20, DEFAULT_SUBSET_CAP), Err(Error::EnumerationTooLarge { .. })));
    }

    #[test]
    fn population_spec_sums_to_one() {
        let p = PopulationSpec::new(layout(5, 4), &[2, 5]).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p.probs[5], 1.0 / 8.0);
        assert_eq!(p.probs[1], 0.0);
        assert_eq!(p.probs[0], 0.0);
    }

    #[test]
    fn corpus_file_round_trip() {
        let cfg = TopicModelConfig::new(layout(4, 5), TopicPolicy::Dirichlet(0.1), LengthPolicy::UniformRange { min: 3, max: 9 }, 77).unwrap();
        let docs = generate(&cfg, 12);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &cfg, &docs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#T=4,v=5,policy=dirichlet(0.1),seed=77\n"));
        let (header, back) = read_corpus(buf.as_slice(), "mem").unwrap();
        assert_eq!(header.layout, cfg.layout);
        assert_eq!(header.seed, 77);
        assert_eq!(back, docs);
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = TopicModelConfig::new(layout(7, 3), TopicPolicy::Dirichlet(0.3), LengthPolicy::UniformRange { min: 1, max: 30 }, 1234).unwrap();
        assert_eq!(generate(&cfg, 40), generate(&cfg, 40));
    }
}
