//! Automatic metrics over generated responses.
//!
//! Candidates and references passed here must already have the speaker
//! token stripped (see [`crate::corpus::content_tokens`]).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `exp(-mean log p)` over gold tokens, skipping entries flagged as the
/// speaker-token position.
pub fn perplexity(log_probs: &[(f64, bool)]) -> Result<f64> {
    let (sum, count) = log_probs
        .iter()
        .filter(|(_, speaker)| !speaker)
        .fold((0.0, 0usize), |(s, c), (lp, _)| (s + lp, c + 1));
    if count == 0 {
        return Err(Error::UndefinedMetric("perplexity of an empty token set"));
    }
    Ok(Float::exp(-sum / count as f64))
}

fn ngrams<W: Ord>(tokens: &[W], n: usize) -> impl Iterator<Item = &[W]> {
    (n > 0 && tokens.len() >= n)
        .then(|| tokens.windows(n))
        .into_iter()
        .flatten()
}

fn counts<W: Ord>(tokens: &[W], n: usize) -> BTreeMap<&[W], usize> {
    let mut m = BTreeMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped matches and total candidate n-grams of order `n` over a corpus.
pub fn modified_precision_counts<W: Ord>(
    candidates: &[Vec<W>],
    references: &[Vec<W>],
    n: usize,
) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (c, r) in candidates.iter().zip(references) {
        let rc = counts(r, n);
        for (g, k) in counts(c, n) {
            matched += k.min(rc.get(g).copied().unwrap_or(0));
            total += k;
        }
    }
    (matched, total)
}

/// Corpus-level BLEU-n: uniform geometric mean of clipped precisions for
/// orders `1..=n`, times the brevity penalty. No smoothing, so any zero
/// precision gives 0.
pub fn bleu_n<W: Ord>(candidates: &[Vec<W>], references: &[Vec<W>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if n == 0 {
        return Err(Error::Contract("BLEU order must be at least 1".into()));
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = modified_precision_counts(candidates, references, k);
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += Float::ln(m as f64 / t as f64);
    }
    let bp = if c > r {
        1.0
    } else {
        Float::exp(1.0 - r as f64 / c as f64)
    };
    Ok(bp * Float::exp(log_sum / n as f64))
}

/// Unique over total n-grams across all candidates.
pub fn distinct_n<W: Ord>(candidates: &[Vec<W>], n: usize) -> Result<f64> {
    let mut unique = BTreeSet::new();
    let mut total = 0usize;
    for c in candidates {
        for g in ngrams(c, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("distinct-n with no n-grams"));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Word vectors of one fixed width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordEmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordEmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Adds or replaces a vector. Its width must match the store.
    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Contract(format!(
                "vector of width {} in a store of width {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.into(), vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    fn lookup<'a, S: AsRef<str>>(&'a self, words: &[S]) -> Vec<&'a [f64]> {
        words.iter().filter_map(|w| self.get(w.as_ref())).collect()
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = Float::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = Float::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    for a in &mut m {
        *a /= vs.len() as f64;
    }
    m
}

/// Per dimension, the value of largest magnitude (the positive one on ties).
fn extrema_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let max = vs.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
            let min = vs.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
            if -min > max {
                min
            } else {
                max
            }
        })
        .collect()
}

fn greedy_match(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| cosine(a, b))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / from.len() as f64
}

/// Corpus means of the three embedding similarities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
    /// Pairs used in the means.
    pub pairs: usize,
    /// Pairs dropped because one side had no word in the store.
    pub skipped: usize,
}

/// Embedding Average, Extrema and Greedy over candidate/reference pairs.
/// Words missing from the store are ignored.
pub fn embedding_metrics<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    store: &WordEmbeddingStore,
) -> Result<EmbeddingScores> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let dim = store.dim();
    let (mut avg, mut ext, mut gre) = (0.0, 0.0, 0.0);
    let (mut pairs, mut skipped) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let cv = store.lookup(c);
        let rv = store.lookup(r);
        if cv.is_empty() || rv.is_empty() {
            skipped += 1;
            continue;
        }
        avg += cosine(&mean_vector(&cv, dim), &mean_vector(&rv, dim));
        ext += cosine(&extrema_vector(&cv, dim), &extrema_vector(&rv, dim));
        gre += (greedy_match(&cv, &rv) + greedy_match(&rv, &cv)) / 2.0;
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric(
            "embedding metrics with no sentence pair in the store",
        ));
    }
    let n = pairs as f64;
    Ok(EmbeddingScores {
        average: avg / n,
        extrema: ext / n,
        greedy: gre / n,
        pairs,
        skipped,
    })
}

/// Full metric battery for one generated-response set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub perplexity: f64,
    pub bleu: [f64; 4],
    pub distinct_1: f64,
    pub distinct_2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<EmbeddingScores>,
    /// Gold tokens scored for perplexity.
    pub perplexity_tokens: usize,
    pub responses: usize,
}

/// Undefined Distinct-n (no n-grams at all, e.g. only empty responses) is
/// reported as 0.
fn zero_if_undefined(v: Result<f64>) -> Result<f64> {
    match v {
        Err(Error::UndefinedMetric(_)) => Ok(0.0),
        v => v,
    }
}

impl MetricReport {
    /// `log_probs` are gold-token log-probabilities with speaker flags;
    /// candidates and references are content tokens.
    pub fn compute<S: AsRef<str> + Ord>(
        log_probs: &[(f64, bool)],
        candidates: &[Vec<S>],
        references: &[Vec<S>],
        store: Option<&WordEmbeddingStore>,
    ) -> Result<Self> {
        let mut bleu = [0.0; 4];
        for (k, b) in bleu.iter_mut().enumerate() {
            *b = bleu_n(candidates, references, k + 1)?;
        }
        let embedding = match store {
            None => None,
            Some(s) => Some(match embedding_metrics(candidates, references, s) {
                Err(Error::UndefinedMetric(_)) => EmbeddingScores {
                    skipped: candidates.len(),
                    ..EmbeddingScores::default()
                },
                other => other?,
            }),
        };
        Ok(Self {
            perplexity: perplexity(log_probs)?,
            bleu,
            distinct_1: zero_if_undefined(distinct_n(candidates, 1))?,
            distinct_2: zero_if_undefined(distinct_n(candidates, 2))?,
            embedding,
            perplexity_tokens: log_probs.iter().filter(|(_, s)| !s).count(),
            responses: candidates.len(),
        })
    }
}
