//! Toy-scale analogues of concept score, erasure rate and generation drift.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::concept::{TextEncoder, Tokenizer};
use crate::diffusion::NoisePredictor;
use crate::error::{Result, SpmError};
use crate::registry::{compose, ComposedModel};
use crate::toy::classifier::ToyClassifier;
use crate::toy::data::class_of;
use crate::toy::testbed::sub_seed;
use crate::toy::vocab::{fill_template, TEMPLATES};

pub const REPORT_VERSION: u32 = 1;

/// Metrics for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub concept: String,
    /// Mean classifier probability of the concept's own label.
    pub concept_score: f64,
    /// Fraction classified as the surrogate.
    pub erasure_rate: f64,
    /// Fraction classified as the concept.
    pub accuracy: f64,
    /// Kernel two-sample divergence to frozen generations under the same seed.
    pub drift: f64,
    pub surrogate: String,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub membranes: Vec<String>,
    pub gamma_scale: f64,
    pub facilitated_transport: bool,
    pub sampler_steps: usize,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, concept: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.concept == concept)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Squared Euclidean distances between the rows of `a` and `b`.
fn sq_dists(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            d[[i, j]] = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    d
}

/// Median pairwise distance among the rows of `x`, the usual Gaussian
/// kernel bandwidth.
pub fn median_bandwidth(x: &Array2<f64>) -> f64 {
    let d = sq_dists(x, x);
    let mut v: Vec<f64> = Vec::new();
    for i in 0..x.nrows() {
        for j in i + 1..x.nrows() {
            v.push(d[[i, j]].sqrt());
        }
    }
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v[v.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased MMD² estimate with a Gaussian kernel of width `bandwidth`,
/// clamped at zero.
pub fn mmd2(x: &Array2<f64>, y: &Array2<f64>, bandwidth: f64) -> Result<f64> {
    if x.ncols() != y.ncols() || x.nrows() == 0 || y.nrows() == 0 {
        return Err(SpmError::Contract("mmd2 needs two non-empty samples of equal width".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(SpmError::Config(format!("kernel bandwidth must be > 0, got {bandwidth}")));
    }
    let g = -1.0 / (2.0 * bandwidth * bandwidth);
    let mean_k = |a: &Array2<f64>, b: &Array2<f64>| sq_dists(a, b).mapv(|d| (g * d).exp()).mean().expect("non-empty");
    Ok((mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0))
}

fn concept_seed(root: u64, concept: &str) -> u64 {
    let h = concept.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    sub_seed(root, h)
}

/// Prompts for `n` samples, cycling through the templates.
pub fn concept_prompts(concept: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| fill_template(TEMPLATES[i % TEMPLATES.len()], concept)).collect()
}

/// Generates `n_samples` for `concept` through `handle` and through
/// `frozen`, both from the same seed, and scores them.
#[allow(clippy::too_many_arguments)]
pub fn eval_concept<M, E>(
    handle: &ComposedModel<'_, M, E>,
    frozen: &ComposedModel<'_, M, E>,
    concept: &str,
    surrogate: &str,
    n_samples: usize,
    classifier: &ToyClassifier,
    sampler_steps: usize,
    seed: u64,
) -> Result<EvalRow>
where
    M: NoisePredictor + ?Sized,
    E: TextEncoder + Tokenizer + ?Sized,
{
    if n_samples == 0 {
        return Err(SpmError::Config("sample count must be >= 1".into()));
    }
    let class = class_of(concept).ok_or_else(|| SpmError::Config(format!("unknown toy concept {concept:?}")))?;
    let sur_class = class_of(surrogate).ok_or_else(|| SpmError::Config(format!("unknown surrogate {surrogate:?}")))?;
    let prompts = concept_prompts(concept, n_samples);
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let seed = concept_seed(seed, concept);
    let x = handle.generate(&refs, sampler_steps, seed)?;
    let x_ref = frozen.generate(&refs, sampler_steps, seed)?;

    let probs = classifier.probabilities(&x)?;
    let pred = classifier.predict(&x)?;
    let n = n_samples as f64;
    let concept_score = probs.column(class).sum() / n;
    let erasure_rate = pred.iter().filter(|&&p| p == sur_class).count() as f64 / n;
    let accuracy = pred.iter().filter(|&&p| p == class).count() as f64 / n;

    let f = classifier.features(&x)?;
    let f_ref = classifier.features(&x_ref)?;
    let drift = if x == x_ref { 0.0 } else { mmd2(&f, &f_ref, median_bandwidth(&f_ref))? };
    Ok(EvalRow {
        concept: concept.to_string(),
        concept_score,
        erasure_rate,
        accuracy,
        drift,
        surrogate: surrogate.to_string(),
        n_samples,
        seed,
    })
}

/// The surrogate a concept is steered to: that of the first membrane
/// targeting it, else the empty prompt.
pub fn surrogate_for<'m, I>(membranes: I, concept: &str) -> String
where
    I: IntoIterator<Item = &'m crate::adapter::Membrane>,
{
    membranes
        .into_iter()
        .find(|m| m.targets.iter().any(|t| t == concept))
        .map(|m| m.surrogate.clone())
        .unwrap_or_default()
}

/// Evaluates every concept in `concepts`.
pub fn evaluate<M, E>(
    handle: &ComposedModel<'_, M, E>,
    concepts: &[String],
    n_samples: usize,
    classifier: &ToyClassifier,
    sampler_steps: usize,
    seed: u64,
) -> Result<EvalReport>
where
    M: NoisePredictor + ?Sized,
    E: TextEncoder + Tokenizer + ?Sized,
{
    let frozen = compose(Vec::new(), handle.model(), handle.encoder(), *handle.gate_config())?;
    let mut rows = Vec::with_capacity(concepts.len());
    for c in concepts {
        let sur = surrogate_for(handle.membranes(), c);
        rows.push(eval_concept(handle, &frozen, c, &sur, n_samples, classifier, sampler_steps, seed)?);
    }
    Ok(EvalReport {
        report_version: REPORT_VERSION,
        membranes: handle.membranes().iter().map(|m| m.name.clone()).collect(),
        gamma_scale: handle.gate_config().gamma_scale,
        facilitated_transport: handle.gate_config().facilitated_transport,
        sampler_steps,
        seed,
        rows,
    })
}

/// Mean drift over rows whose concept is not in `exclude`.
pub fn mean_drift(report: &EvalReport, exclude: &[String]) -> f64 {
    let rows: Vec<&EvalRow> = report.rows.iter().filter(|r| !exclude.contains(&r.concept)).collect();
    rows.iter().map(|r| r.drift).sum::<f64>() / rows.len().max(1) as f64
}
