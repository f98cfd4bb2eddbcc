//! Shared fixtures for the integration suites: a cached seed-0 testbed and
//! small wrappers around training and evaluation.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::Array1;
use sha2::{Digest, Sha256};
use spm_core::concept::{AnchorPool, WordTokenizer};
use spm_core::eval::{evaluate, EvalReport};
use spm_core::toy::vocab::default_anchor_vocabulary;
use spm_core::toy::{Testbed, TestbedConfig, ToyVocabulary};
use spm_core::{compose, train_membrane, ConceptEncoding, GateConfig, Membrane, Result, SpmError, TextEncoder, Tokenizer, TrainConfig};

pub const EVAL_SAMPLES: usize = 64;
pub const EVAL_SEED: u64 = 123;
pub const SAMPLER_STEPS: usize = 50;

fn cache_dir(config: &TestbedConfig) -> PathBuf {
    let key = hex::encode(Sha256::digest(serde_json::to_vec(config).expect("serializable")));
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("testbed-{}", &key[..16]))
}

/// The seed-0 testbed, built once per target directory and reused across
/// test binaries.
pub fn testbed() -> &'static Testbed {
    static TB: OnceLock<Testbed> = OnceLock::new();
    TB.get_or_init(|| {
        let config = TestbedConfig::with_seed(0);
        let dir = cache_dir(&config);
        if let Ok(tb) = Testbed::load(&dir) {
            if tb.config == config {
                return tb;
            }
        }
        let tb = Testbed::build(config).expect("testbed build");
        let staging = dir.with_extension(format!("tmp{}", std::process::id()));
        tb.save(&staging).expect("save testbed");
        let _ = std::fs::remove_dir_all(&dir);
        // another process may have won the race; either copy is identical
        if std::fs::rename(&staging, &dir).is_err() {
            let _ = std::fs::remove_dir_all(&staging);
        }
        tb
    })
}

pub fn anchor_pool(tb: &Testbed, targets: &[String], alpha: f64) -> AnchorPool {
    let enc: Vec<_> = targets.iter().map(|t| tb.encoder.encode(t).unwrap()).collect();
    let cands = default_anchor_vocabulary().iter().map(|v| tb.encoder.encode(v).unwrap()).collect();
    AnchorPool::for_targets(cands, &enc, alpha).unwrap()
}

pub fn train(tb: &Testbed, targets: &[&str], cfg: &TrainConfig) -> Membrane {
    let targets: Vec<String> = targets.iter().map(|s| s.to_string()).collect();
    let pool = anchor_pool(tb, &targets, cfg.alpha);
    train_membrane(&tb.denoiser, &tb.encoder, &targets, cfg, Some(&pool)).unwrap()
}

pub fn report(tb: &Testbed, membranes: Vec<Membrane>, facilitated_transport: bool) -> EvalReport {
    let gate = GateConfig { facilitated_transport, ..GateConfig::default() };
    let h = compose(membranes, &tb.denoiser, &tb.encoder, gate).unwrap();
    evaluate(&h, &ToyVocabulary::concepts(), EVAL_SAMPLES, &tb.classifier, SAMPLER_STEPS, EVAL_SEED).unwrap()
}

/// Gives each known word its own axis, so encodings of disjoint prompts are
/// orthogonal.
pub struct OneHot {
    axes: HashMap<String, usize>,
}

impl OneHot {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut axes = HashMap::new();
        for w in words {
            for tok in WordTokenizer.tokenize(w) {
                let next = axes.len();
                axes.entry(tok).or_insert(next);
            }
        }
        OneHot { axes }
    }
}

impl TextEncoder for OneHot {
    fn dim(&self) -> usize {
        self.axes.len()
    }
    fn encode(&self, text: &str) -> Result<ConceptEncoding> {
        let mut v = Array1::zeros(self.axes.len());
        for tok in WordTokenizer.tokenize(text) {
            let i = self.axes.get(&tok).ok_or_else(|| SpmError::Config(format!("unknown word {tok}")))?;
            v[*i] += 1.0;
        }
        Ok(ConceptEncoding::new(text, v))
    }
}


impl Tokenizer for OneHot {
    fn tokenize(&self, text: &str) -> Vec<String> {
        WordTokenizer.tokenize(text)
    }
}
