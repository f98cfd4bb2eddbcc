//! Concept encodings and the Latent Anchoring sampling distribution.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpmError};

/// Pooled text encoding of a concept or prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEncoding {
    pub vector: Array1<f64>,
    pub source: String,
}

impl ConceptEncoding {
    pub fn new(source: impl Into<String>, vector: Array1<f64>) -> Self {
        ConceptEncoding { vector, source: source.into() }
    }

    pub fn norm(&self) -> f64 {
        self.vector.dot(&self.vector).sqrt()
    }

    pub fn cosine(&self, other: &ConceptEncoding) -> Result<f64> {
        if self.vector.len() != other.vector.len() {
            return Err(SpmError::Contract(format!(
                "encoding lengths differ: {} vs {}",
                self.vector.len(),
                other.vector.len()
            )));
        }
        let (na, nb) = (self.norm(), other.norm());
        for (n, src) in [(na, &self.source), (nb, &other.source)] {
            if !(n > 0.0) || !n.is_finite() {
                return Err(SpmError::Degenerate(format!("encoding of {src:?} has zero or non-finite norm")));
            }
        }
        Ok((self.vector.dot(&other.vector) / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Splits text into tokens.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Maps text to a fixed-length pooled encoding.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<ConceptEncoding>;
}

/// Whole-word tokenizer: case-folded, split on anything that is not alphanumeric.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

/// Deduplicated, case-folded token set.
pub fn token_set<T: Tokenizer + ?Sized>(tokenizer: &T, text: &str) -> BTreeSet<String> {
    tokenizer.tokenize(text).into_iter().map(|t| t.to_lowercase()).collect()
}

/// Unnormalized anchor sampling weight `(1 - |cos(c, c_tar)|)^α`.
///
/// Candidates parallel to the target get exactly zero, including at α = 0.
pub fn anchor_weight(c: &ConceptEncoding, c_tar: &ConceptEncoding, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(SpmError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let distance = 1.0 - c.cosine(c_tar)?.abs();
    if distance <= 1e-12 {
        return Ok(0.0);
    }
    Ok(distance.powf(alpha))
}

/// Candidate anchor concepts with their sampling weights.
#[derive(Debug, Clone)]
pub struct AnchorPool {
    candidates: Vec<ConceptEncoding>,
    weights: Vec<f64>,
    alpha: f64,
    index: WeightedIndex<f64>,
}

impl AnchorPool {
    pub fn from_encodings(candidates: Vec<ConceptEncoding>, target: &ConceptEncoding, alpha: f64) -> Result<Self> {
        Self::for_targets(candidates, std::slice::from_ref(target), alpha)
    }

    /// Pool for a multi-target membrane: a candidate's weight is its smallest
    /// weight against any target, so anything parallel to one target is
    /// excluded.
    pub fn for_targets(candidates: Vec<ConceptEncoding>, targets: &[ConceptEncoding], alpha: f64) -> Result<Self> {
        if candidates.is_empty() {
            return Err(SpmError::Config("anchor vocabulary is empty".into()));
        }
        if targets.is_empty() {
            return Err(SpmError::Config("anchor pool needs at least one target".into()));
        }
        let weights = candidates
            .iter()
            .map(|c| {
                targets
                    .iter()
                    .map(|t| anchor_weight(c, t, alpha))
                    .try_fold(f64::INFINITY, |acc, w| w.map(|w| acc.min(w)))
            })
            .collect::<Result<Vec<_>>>()?;
        if weights.iter().sum::<f64>() <= 0.0 {
            let names: Vec<&str> = targets.iter().map(|t| t.source.as_str()).collect();
            return Err(SpmError::Config(format!(
                "every anchor candidate is parallel to target {names:?}; total sampling weight is zero"
            )));
        }
        let index = WeightedIndex::new(&weights).map_err(|e| SpmError::Config(format!("anchor weights: {e}")))?;
        Ok(AnchorPool { candidates, weights, alpha, index })
    }

    pub fn candidates(&self) -> &[ConceptEncoding] {
        &self.candidates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// Index of the next categorical draw.
    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ConceptEncoding> {
        (0..n).map(|_| self.candidates[self.draw_index(rng)].clone()).collect()
    }
}

/// Encodes `vocabulary` and weights each entry against `target`.
pub fn build_anchor_pool<E: TextEncoder + ?Sized>(
    vocabulary: &[String],
    target: &ConceptEncoding,
    alpha: f64,
    encoder: &E,
) -> Result<AnchorPool> {
    if vocabulary.is_empty() {
        return Err(SpmError::Config("anchor vocabulary is empty".into()));
    }
    let encodings = vocabulary.iter().map(|v| encoder.encode(v)).collect::<Result<Vec<_>>>()?;
    AnchorPool::from_encodings(encodings, target, alpha)
}

/// `n` seeded independent draws from `pool`.
pub fn sample_anchors(pool: &AnchorPool, n: usize, seed: u64) -> Result<Vec<ConceptEncoding>> {
    if n == 0 {
        return Err(SpmError::Config("anchor sample count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pool.sample(n, &mut rng))
}

/// Reads a newline-delimited vocabulary, skipping blank lines and `#` comments.
pub fn parse_vocabulary(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}
