//! Facilitated Transport: prompt-conditioned permeability for each membrane.
//!
//! For a target concept `c` and prompt `p`:
//!
//! ```text
//! s_f = max(0, cos(E(c), E(p)))          global encoding similarity
//! s_t = |T(c) ∩ T(p)| / |T(c)|           unigram token overlap
//! γ   = max(s_f, s_t)
//! ```
//!
//! A membrane with several targets gates on its most activated one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::Membrane;
use crate::concept::{token_set, TextEncoder, Tokenizer};
use crate::error::{Result, SpmError};

/// Fraction of the concept's distinct tokens that occur in the prompt.
pub fn token_similarity<T: Tokenizer + ?Sized>(concept: &str, prompt: &str, tokenizer: &T) -> Result<f64> {
    let concept_tokens = token_set(tokenizer, concept);
    if concept_tokens.is_empty() {
        return Err(SpmError::Config(format!("concept {concept:?} has no tokens")));
    }
    let prompt_tokens = token_set(tokenizer, prompt);
    let shared = concept_tokens.intersection(&prompt_tokens).count();
    Ok(shared as f64 / concept_tokens.len() as f64)
}

/// Cosine similarity of pooled encodings, clamped to `[0, 1]`.
pub fn global_similarity<E: TextEncoder + ?Sized>(concept: &str, prompt: &str, encoder: &E) -> Result<f64> {
    let c = encoder.encode(concept)?;
    let p = encoder.encode(prompt)?;
    Ok(c.cosine(&p)?.max(0.0))
}

/// User-side control over permeability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Multiplier applied after gating.
    pub gamma_scale: f64,
    /// Largest accepted `gamma_scale`.
    pub max_scale: f64,
    /// When false, gating is bypassed and every membrane runs at γ = 1
    /// (before scaling).
    pub facilitated_transport: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { gamma_scale: 1.0, max_scale: 4.0, facilitated_transport: true }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_scale >= 0.0) || self.gamma_scale > self.max_scale {
            return Err(SpmError::Config(format!(
                "gamma scale {} outside [0, {}]",
                self.gamma_scale, self.max_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGate {
    pub target: String,
    pub s_f: f64,
    pub s_t: f64,
    pub gamma: f64,
}

/// Permeability of one membrane for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub membrane: String,
    pub prompt: String,
    pub targets: Vec<TargetGate>,
    /// Max over targets, in `[0, 1]`.
    pub gamma: f64,
    pub gamma_scaled: f64,
}

/// Gates `membrane` on `prompt` with γ-scale 1.
pub fn permeability<T, E>(membrane: &Membrane, prompt: &str, tokenizer: &T, encoder: &E) -> Result<GateReport>
where
    T: Tokenizer + ?Sized,
    E: TextEncoder + ?Sized,
{
    gate(membrane, prompt, tokenizer, encoder, &GateConfig::default())
}

/// Gates `membrane` on `prompt` under `config`.
pub fn gate<T, E>(membrane: &Membrane, prompt: &str, tokenizer: &T, encoder: &E, config: &GateConfig) -> Result<GateReport>
where
    T: Tokenizer + ?Sized,
    E: TextEncoder + ?Sized,
{
    config.validate()?;
    if membrane.targets.is_empty() {
        return Err(SpmError::Config(format!("membrane `{}` has no target concepts", membrane.name)));
    }
    let prompt_enc = encoder.encode(prompt)?;
    let mut targets = Vec::with_capacity(membrane.targets.len());
    for target in &membrane.targets {
        let s_t = token_similarity(target, prompt, tokenizer)?;
        let s_f = encoder.encode(target)?.cosine(&prompt_enc)?.max(0.0);
        targets.push(TargetGate { target: target.clone(), s_f, s_t, gamma: s_f.max(s_t) });
    }
    let gamma = if config.facilitated_transport {
        targets.iter().map(|t| t.gamma).fold(0.0, f64::max)
    } else {
        1.0
    };
    Ok(GateReport {
        membrane: membrane.name.clone(),
        prompt: prompt.to_string(),
        targets,
        gamma,
        gamma_scaled: gamma * config.gamma_scale,
    })
}

impl fmt::Display for GateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.targets {
            writeln!(
                f,
                "membrane={} target={:?} s_f={:.4} s_t={:.4} gamma={:.4}",
                self.membrane, t.target, t.s_f, t.s_t, t.gamma
            )?;
        }
        write!(f, "membrane={} gamma={:.4} gamma_scaled={:.4}", self.membrane, self.gamma, self.gamma_scaled)
    }
}
