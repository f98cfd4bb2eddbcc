use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptEncoding, TextEncoder, Tokenizer, WordTokenizer};
use crate::diffusion::standard_normal;
use crate::error::{Result, SpmError};

pub const COLORS: [&str; 3] = ["red", "blue", "white"];
pub const SHAPES: [&str; 4] = ["square", "cross", "circle", "triangle"];
pub const FILLERS: [&str; 10] = ["a", "an", "the", "of", "photo", "picture", "drawing", "image", "rendering", "sketch"];

/// Prompt templates used for pre-training and evaluation; `{}` is the concept.
pub const TEMPLATES: [&str; 8] = [
    "{}",
    "a {}",
    "a photo of a {}",
    "a picture of a {}",
    "a drawing of a {}",
    "an image of a {}",
    "a rendering of a {}",
    "a sketch of the {}",
];

/// Encoding width.
pub const ENCODING_DIM: usize = 32;
const FILLER_NORM: f64 = 0.25;
/// Weight of the contextual feature a colour word followed by a shape word adds.
const BIGRAM_WEIGHT: f64 = 1.0;

pub fn fill_template(template: &str, concept: &str) -> String {
    template.replace("{}", concept)
}

/// The toy conceptual space: colour and shape words on orthonormal
/// directions, one contextual direction per colour-shape pair, filler words
/// as short vectors in the complement, and a null direction for the empty
/// prompt.
#[derive(Debug, Clone)]
pub struct ToyVocabulary {
    seed: u64,
    table: HashMap<String, Array1<f64>>,
    bigrams: HashMap<(String, String), Array1<f64>>,
    null: Array1<f64>,
}

impl ToyVocabulary {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = orthonormal_basis(ENCODING_DIM, &mut rng);
        let mut table = HashMap::new();
        for (i, w) in COLORS.iter().chain(SHAPES.iter()).enumerate() {
            table.insert(w.to_string(), basis.row(i).to_owned());
        }
        let mut next = COLORS.len() + SHAPES.len();
        let null = basis.row(next).to_owned();
        next += 1;
        let mut bigrams = HashMap::new();
        for c in COLORS {
            for s in SHAPES {
                bigrams.insert((c.to_string(), s.to_string()), basis.row(next).to_owned());
                next += 1;
            }
        }
        let complement = basis.slice(ndarray::s![next.., ..]).to_owned();
        for w in FILLERS {
            let coeffs = standard_normal(1, complement.nrows(), &mut rng).row(0).to_owned();
            let mut v = coeffs.dot(&complement);
            let n = v.dot(&v).sqrt();
            v *= FILLER_NORM / n;
            table.insert(w.to_string(), v);
        }
        ToyVocabulary { seed, table, bigrams, null }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The 12 colour-shape concepts, colour-major.
    pub fn concepts() -> Vec<String> {
        COLORS
            .iter()
            .flat_map(|c| SHAPES.iter().map(move |s| format!("{c} {s}")))
            .collect()
    }

    /// Concept words plus filler words.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = self.table.keys().cloned().collect();
        w.sort();
        w
    }

    /// Deterministic embedding for any word; unknown words hash onto a random
    /// unit vector.
    pub fn embed(&self, word: &str) -> Array1<f64> {
        if let Some(v) = self.table.get(word) {
            return v.clone();
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut v = standard_normal(1, ENCODING_DIM, &mut rng).row(0).to_owned();
        let n = v.dot(&v).sqrt();
        v /= n;
        v
    }

    pub fn null_embedding(&self) -> &Array1<f64> {
        &self.null
    }
}

/// Default anchor vocabulary for the toy space: every concept and every
/// single colour/shape word.
///
/// Templated prompts are left out: a paraphrase of the target keeps a small
/// but non-zero anchor weight, and under a large anchoring weight it cancels
/// the erasure.
pub fn default_anchor_vocabulary() -> Vec<String> {
    let mut v = ToyVocabulary::concepts();
    v.extend(COLORS.iter().chain(SHAPES.iter()).map(|s| s.to_string()));
    v
}

fn orthonormal_basis(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut basis = standard_normal(dim, dim, rng);
    for i in 0..dim {
        for j in 0..i {
            let proj = basis.row(i).dot(&basis.row(j));
            let bj = basis.row(j).to_owned();
            basis.row_mut(i).scaled_add(-proj, &bj);
        }
        let n = basis.row(i).dot(&basis.row(i)).sqrt();
        basis.row_mut(i).mapv_inplace(|v| v / n);
    }
    basis
}

/// Mean-pooled, L2-normalized word embeddings over the whole-word tokenizer.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    vocab: ToyVocabulary,
}

impl ToyTextEncoder {
    pub fn new(vocab: ToyVocabulary) -> Self {
        ToyTextEncoder { vocab }
    }

    pub fn vocabulary(&self) -> &ToyVocabulary {
        &self.vocab
    }

    /// Encodes a batch of prompts into conditioning rows.
    pub fn encode_batch(&self, prompts: &[&str]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((prompts.len(), ENCODING_DIM));
        for (i, p) in prompts.iter().enumerate() {
            out.row_mut(i).assign(&self.encode(p)?.vector);
        }
        Ok(out)
    }
}

impl Tokenizer for ToyTextEncoder {
    fn tokenize(&self, text: &str) -> Vec<String> {
        WordTokenizer.tokenize(text)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        ENCODING_DIM
    }

    fn encode(&self, text: &str) -> Result<ConceptEncoding> {
        let tokens = self.tokenize(text);
        let mut v = if tokens.is_empty() {
            self.vocab.null.clone()
        } else {
            let mut acc = Array1::zeros(ENCODING_DIM);
            for t in &tokens {
                acc += &self.vocab.embed(t);
            }
            for pair in tokens.windows(2) {
                if let Some(b) = self.vocab.bigrams.get(&(pair[0].clone(), pair[1].clone())) {
                    acc.scaled_add(BIGRAM_WEIGHT, b);
                }
            }
            acc / tokens.len() as f64
        };
        let n = v.dot(&v).sqrt();
        if !(n > 1e-12) {
            return Err(SpmError::Degenerate(format!("prompt {text:?} pools to a zero vector")));
        }
        v /= n;
        Ok(ConceptEncoding::new(text, v))
    }
}

/// Tokenizer/encoder descriptor persisted with a testbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularySpec {
    pub seed: u64,
}
