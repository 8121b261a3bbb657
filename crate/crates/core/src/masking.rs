//! BERT-style masking and the exact post-masking token distribution.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_tokens, sample_topic_weights, write_tokens, Document, Layout, TopicModelConfig};
use crate::error::{config_err, Error, Result};

pub const MASK: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Probability that a position is selected for prediction.
    pub p_mask: f64,
    /// Probability that a selected position keeps its token.
    pub p_keep: f64,
    /// Probability that a selected position gets a uniformly random word.
    pub p_random: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_mask: 0.15,
            p_keep: 0.1,
            p_random: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn new(p_mask: f64, p_keep: f64, p_random: f64) -> Result<Self> {
        let cfg = Self {
            p_mask,
            p_keep,
            p_random,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_m", self.p_mask), ("p_c", self.p_keep), ("p_r", self.p_random)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_keep + self.p_random > 1.0 {
            return Err(config_err("p_c + p_r must not exceed 1"));
        }
        Ok(())
    }

    /// Probability that a selected position becomes the mask token.
    pub fn p_mask_token(&self) -> f64 {
        self.p_mask * (1.0 - self.p_keep - self.p_random)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDocument {
    pub original: Document,
    pub masked: Vec<usize>,
    /// Sorted positions selected for prediction.
    pub mask_set: Vec<usize>,
    /// Number of times the selection came out empty and was redrawn.
    pub retries: u32,
}

impl MaskedDocument {
    pub fn labels(&self) -> Vec<usize> {
        self.mask_set.iter().map(|&j| self.original.tokens[j]).collect()
    }
}

/// Masks `doc`. With `p_mask == 0` nothing is selected and the document is
/// returned unchanged; otherwise an empty selection is redrawn.
pub fn mask_document<R: Rng + ?Sized>(doc: &Document, cfg: &MaskingConfig, layout: Layout, rng: &mut R) -> MaskedDocument {
    let n = doc.tokens.len();
    let mut retries = 0;
    loop {
        let mut masked = doc.tokens.clone();
        let mut mask_set = Vec::new();
        if cfg.p_mask > 0.0 {
            for (j, tok) in masked.iter_mut().enumerate() {
                if rng.random::<f64>() >= cfg.p_mask {
                    continue;
                }
                mask_set.push(j);
                let u: f64 = rng.random();
                if u < cfg.p_keep {
                } else if u < cfg.p_keep + cfg.p_random {
                    *tok = rng.random_range(1..=layout.num_words());
                } else {
                    *tok = MASK;
                }
            }
        }
        if !mask_set.is_empty() || cfg.p_mask == 0.0 || n == 0 {
            return MaskedDocument {
                original: doc.clone(),
                masked,
                mask_set,
                retries,
            };
        }
        retries += 1;
    }
}

/// Token counts of one masked document, without positions. Under uniform
/// attention these are all the loss depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedCounts {
    pub length: u64,
    /// Observed-token counts, index 0 is the mask token.
    pub observed: Vec<u64>,
    /// Original-token counts over the masked positions.
    pub labels: Vec<u64>,
    pub retries: u32,
}

impl MaskedCounts {
    pub fn masked(&self) -> u64 {
        self.labels.iter().sum()
    }
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("probability in (0, 1)").sample(rng)
}

/// Multinomial draw by sequential binomial splitting.
fn multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut left = n;
    let mut mass: f64 = probs.iter().sum();
    for (slot, &p) in out.iter_mut().zip(probs) {
        if left == 0 {
            break;
        }
        let k = if mass <= p { left } else { binomial(left, p / mass, rng) };
        *slot = k;
        left -= k;
        mass -= p;
    }
    out
}

/// Samples the token counts of a length-`length` document from `cfg` and
/// masks it, in distribution identical to `sample_document` followed by
/// `mask_document` but at a cost independent of the length. The document
/// stream drives the word counts and the masking stream the masking.
pub fn sample_masked_counts<R: Rng + ?Sized, S: Rng + ?Sized>(
    cfg: &TopicModelConfig,
    length: u64,
    masking: &MaskingConfig,
    doc_rng: &mut R,
    mask_rng: &mut S,
) -> MaskedCounts {
    let layout = cfg.layout;
    let v = layout.words_per_topic;
    let weights = sample_topic_weights(cfg, doc_rng);
    let word_probs: Vec<f64> = (0..layout.num_words()).map(|w| weights[w / v] / v as f64).collect();
    let words = multinomial(length, &word_probs, doc_rng);
    let p_random_rest = if masking.p_keep < 1.0 { masking.p_random / (1.0 - masking.p_keep) } else { 0.0 };
    let mut retries = 0;
    loop {
        let mut observed = vec![0u64; layout.vocab_size()];
        let mut labels = vec![0u64; layout.vocab_size()];
        let mut replaced = 0;
        for (w, &c) in words.iter().enumerate() {
            let selected = binomial(c, masking.p_mask, mask_rng);
            let kept = binomial(selected, masking.p_keep, mask_rng);
            let random = binomial(selected - kept, p_random_rest, mask_rng);
            labels[w + 1] = selected;
            observed[w + 1] += c - selected + kept;
            observed[MASK] += selected - kept - random;
            replaced += random;
        }
        let spread = multinomial(replaced, &vec![1.0; layout.num_words()], mask_rng);
        for (w, k) in spread.into_iter().enumerate() {
            observed[w + 1] += k;
        }
        if labels.iter().any(|&l| l > 0) || masking.p_mask == 0.0 || length == 0 {
            return MaskedCounts {
                length,
                observed,
                labels,
                retries,
            };
        }
        retries += 1;
    }
}

/// Per-word probabilities of the observed (masked) token for a document on
/// `tau` topics, with uniform words over those topics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedStats {
    /// Each word of an in-document topic.
    pub p_in: f64,
    /// Each word outside the document's topics.
    pub p_out: f64,
    /// The mask token.
    pub p_mask: f64,
}

pub fn masked_distribution(cfg: &MaskingConfig, layout: Layout, tau: usize) -> Result<MaskedStats> {
    if tau == 0 || tau > layout.num_topics {
        return Err(config_err(format!("tau = {tau} must lie in [1, T = {}]", layout.num_topics)));
    }
    let (pm, pc, pr) = (cfg.p_mask, cfg.p_keep, cfg.p_random);
    let v = layout.words_per_topic as f64;
    let t = layout.num_topics as f64;
    let p_out = pm * pr / (v * t);
    Ok(MaskedStats {
        p_in: (1.0 - (1.0 - pc) * pm) / (v * tau as f64) + p_out,
        p_out,
        p_mask: cfg.p_mask_token(),
    })
}

pub fn write_masked_corpus<W: Write>(out: &mut W, docs: &[MaskedDocument]) -> Result<()> {
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        write_tokens(out, &d.original.tokens)?;
        write_tokens(out, &d.masked)?;
    }
    Ok(())
}

/// Reads `(original, masked)` pairs. Mask sets cannot be recovered exactly
/// from text (kept tokens are invisible), so only the pairs are returned.
pub fn read_masked_pairs<R: BufRead>(input: R, source_name: &str) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut out = Vec::new();
    let mut pending: Option<Vec<usize>> = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks = parse_tokens(&line, i + 1, source_name)?;
        match pending.take() {
            None => pending = Some(toks),
            Some(orig) => {
                if orig.len() != toks.len() {
                    return Err(Error::Parse {
                        source_name: source_name.into(),
                        line: i + 1,
                        msg: "masked line length differs from original".into(),
                    });
                }
                out.push((orig, toks));
            }
        }
    }
    if pending.is_some() {
        return Err(Error::Parse {
            source_name: source_name.into(),
            line: 0,
            msg: "dangling original line without masked partner".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{nth_document, LengthPolicy, TopicModelConfig, TopicPolicy};
    use crate::rng::{stream, Domain};

    #[test]
    fn count_sampler_matches_positional_sampler() {
        // per-coordinate means of observed and label counts from both
        // samplers agree within 5 standard errors
        let layout = Layout::new(3, 2).unwrap();
        let cfg = TopicModelConfig::new(layout, TopicPolicy::Dirichlet(0.5), LengthPolicy::Fixed(40), 9).unwrap();
        let masking = MaskingConfig::new(0.3, 0.2, 0.3).unwrap();
        let docs = 4000;
        let vocab = layout.vocab_size();
        let mut stats = [[(0.0f64, 0.0f64); 7]; 4];
        let mut push = |k: usize, counts: &[u64]| {
            for (w, &c) in counts.iter().enumerate() {
                stats[k][w].0 += c as f64;
                stats[k][w].1 += (c * c) as f64;
            }
        };
        for i in 0..docs {
            let d = nth_document(&cfg, i);
            let m = mask_document(&d, &masking, layout, &mut stream(1, Domain::Masking, i));
            let mut obs = vec![0u64; vocab];
            m.masked.iter().for_each(|&t| obs[t] += 1);
            let mut lab = vec![0u64; vocab];
            m.labels().iter().for_each(|&t| lab[t] += 1);
            push(0, &obs);
            push(1, &lab);
            let c = sample_masked_counts(&cfg, 40, &masking, &mut stream(2, Domain::Corpus, i), &mut stream(2, Domain::Masking, i));
            assert_eq!(c.observed.iter().sum::<u64>(), 40);
            push(2, &c.observed);
            push(3, &c.labels);
        }
        let n = docs as f64;
        for (a, b) in [(0, 2), (1, 3)] {
            for w in 0..vocab {
                let mean = |k: usize| stats[k][w].0 / n;
                let var = |k: usize| stats[k][w].1 / n - mean(k) * mean(k);
                let se = ((var(a) + var(b)) / n).sqrt();
                assert!((mean(a) - mean(b)).abs() <= 5.0 * se + 1e-12, "coordinate {w}: {} vs {}", mean(a), mean(b));
            }
        }
    }

    fn doc(tokens: Vec<usize>) -> Document {
        Document {
            tokens,
            topic_set: vec![1],
        }
    }

    #[test]
    fn zero_mask_probability_is_identity() {
        let d = doc(vec![1, 2, 3, 2]);
        let cfg = MaskingConfig::new(0.0, 0.1, 0.1).unwrap();
        let m = mask_document(&d, &cfg, Layout::new(1, 3).unwrap(), &mut stream(1, Domain::Masking, 0));
        assert_eq!(m.retries, 0);
        assert!(m.mask_set.is_empty());
        assert_eq!(m.masked, d.tokens);
    }

    #[test]
    fn full_selection_with_keep() {
        let d = doc(vec![1, 2, 3, 2]);
        let cfg = MaskingConfig::new(1.0, 1.0, 0.0).unwrap();
        let m = mask_document(&d, &cfg, Layout::new(1, 3).unwrap(), &mut stream(1, Domain::Masking, 0));
        assert_eq!(m.masked, d.tokens);
        assert_eq!(m.mask_set, vec![0, 1, 2, 3]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(MaskingConfig::new(1.2, 0.1, 0.1).is_err());
        assert!(MaskingConfig::new(0.15, 0.6, 0.5).is_err());
        assert!(MaskingConfig::new(0.15, -0.1, 0.5).is_err());
    }

    #[test]
    fn short_documents_are_redrawn_until_nonempty() {
        let d = doc(vec![2]);
        let cfg = MaskingConfig::default();
        let mut total = 0;
        for i in 0..200 {
            let m = mask_document(&d, &cfg, Layout::new(1, 3).unwrap(), &mut stream(5, Domain::Masking, i));
            assert_eq!(m.mask_set, vec![0]);
            total += m.retries;
        }
        // geometric with success 0.15: mean 1/0.15 - 1 retries per draw
        let mean = total as f64 / 200.0;
        assert!((mean - (1.0 / 0.15 - 1.0)).abs() < 1.5, "mean retries {mean}");
    }

    #[test]
    fn distribution_example_values() {
        let l = Layout::new(10, 10).unwrap();
        let s = masked_distribution(&MaskingConfig::default(), l, 2).unwrap();
        // (1/20)(1 - 0.9*0.15) + 0.015/100 and 0.015/100
        assert!((s.p_in - (0.05 * 0.865 + 0.00015)).abs() < 1e-15);
        assert!((s.p_out - 0.00015).abs() < 1e-15);
        assert!((s.p_mask - 0.12).abs() < 1e-15);
        assert!((s.p_in - 0.04340).abs() < 1e-12);
        assert!((20.0 * s.p_in + 80.0 * s.p_out + s.p_mask - 1.0).abs() < 1e-14);
        let no_random = masked_distribution(&MaskingConfig::new(0.15, 0.1, 0.0).unwrap(), l, 2).unwrap();
        assert_eq!(no_random.p_out, 0.0);
    }

    #[test]
    fn mask_token_only_at_selected_positions() {
        let cfg = TopicModelConfig::new(Layout::new(5, 4).unwrap(), TopicPolicy::FixedTau(2), LengthPolicy::Fixed(200), 3).unwrap();
        let d = nth_document(&cfg, 0);
        let m = mask_document(&d, &MaskingConfig::default(), cfg.layout, &mut stream(3, Domain::Masking, 0));
        for j in 0..d.len() {
            if m.mask_set.binary_search(&j).is_err() {
                assert_eq!(m.masked[j], d.tokens[j]);
            }
            if m.masked[j] == MASK {
                assert!(m.mask_set.binary_search(&j).is_ok());
            }
        }
    }

    #[test]
    fn masked_corpus_round_trip() {
        let cfg = TopicModelConfig::new(Layout::new(3, 3).unwrap(), TopicPolicy::FixedTau(2), LengthPolicy::Fixed(30), 8).unwrap();
        let docs: Vec<MaskedDocument> = (0..3)
            .map(|i| mask_document(&nth_document(&cfg, i), &MaskingConfig::default(), cfg.layout, &mut stream(8, Domain::Masking, i)))
            .collect();
        let mut buf = Vec::new();
        write_masked_corpus(&mut buf, &docs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3 * 2 + 2);
        let pairs = read_masked_pairs(buf.as_slice(), "mem").unwrap();
        for (p, d) in pairs.iter().zip(&docs) {
            assert_eq!(p.0, d.original.tokens);
            assert_eq!(p.1, d.masked);
        }
    }
}
