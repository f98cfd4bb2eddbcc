//! Erasing loss, Latent Anchoring and the membrane training loop.
//!
//! Every frozen-model evaluation is made with an empty adapter list, so no
//! gradient reaches the host; only membrane parameters are updated.

use std::ops::RangeInclusive;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{inject, Applied, Membrane, TrainMeta};
use crate::concept::{AnchorPool, ConceptEncoding, TextEncoder};
use crate::diffusion::{denoise, standard_normal, NoisePredictor};
use crate::error::{Result, SpmError};
use crate::nn::{AdamW, AdapterGrad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Erasure guidance strength.
    pub eta: f64,
    /// Weight of the anchoring loss.
    pub lambda: f64,
    /// Anchor sharpness.
    pub alpha: f64,
    pub steps: usize,
    pub anchor_samples: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub restart_cycles: usize,
    /// Latents drawn per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Intrinsic dimension of the injected membrane.
    pub dim: usize,
    pub enable_la: bool,
    /// Recorded for evaluation; training always runs at γ = 1.
    pub enable_ft_at_eval: bool,
    /// Surrogate prompt; empty means the unconditional prompt.
    pub surrogate: String,
    /// Timesteps `x_t` is drawn from. `None` means `1..=T`.
    pub t_range: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 1.0,
            lambda: 1e3,
            alpha: 1.0,
            steps: 3000,
            anchor_samples: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            warmup_steps: 500,
            restart_cycles: 3,
            batch_size: 1,
            seed: 0,
            dim: 1,
            enable_la: true,
            enable_ft_at_eval: true,
            surrogate: String::new(),
            t_range: None,
        }
    }
}

impl TrainConfig {
    /// Loss weights as the defaults, with step count, learning rate and
    /// batch scaled to the toy testbed.
    pub fn toy() -> Self {
        TrainConfig {
            steps: 1500,
            learning_rate: 1e-2,
            warmup_steps: 75,
            restart_cycles: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(SpmError::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SpmError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) {
            return Err(SpmError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SpmError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.dim == 0 {
            return Err(SpmError::Config("batch size and dimension must be >= 1".into()));
        }
        if self.enable_la && self.anchor_samples == 0 {
            return Err(SpmError::Config("anchor sample count must be >= 1 with anchoring enabled".into()));
        }
        if let Some((lo, hi)) = self.t_range {
            if lo == 0 || lo > hi {
                return Err(SpmError::Config(format!("timestep range {lo}..={hi} is empty or includes 0")));
            }
        }
        Ok(())
    }

    /// λ actually applied: zero when anchoring is disabled.
    pub fn effective_lambda(&self) -> f64 {
        if self.enable_la {
            self.lambda
        } else {
            0.0
        }
    }
}

/// `ε_sur − η (ε_tar − ε_sur)`.
pub fn erasing_target(eps_tar: &Array2<f64>, eps_sur: &Array2<f64>, eta: f64) -> Result<Array2<f64>> {
    if eps_tar.dim() != eps_sur.dim() {
        return Err(SpmError::Contract(format!("noise estimates differ in shape: {:?} vs {:?}", eps_tar.dim(), eps_sur.dim())));
    }
    Ok(eps_sur - &((eps_tar - eps_sur) * eta))
}

/// `era + λ anc`.
pub fn total_loss(era: f64, anc: f64, lambda: f64) -> f64 {
    era + lambda * anc
}

/// A loss value with its gradient w.r.t. the trainable membrane, flattened in
/// [`Membrane::parameters`] order.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<f64>,
}

fn flatten(grads: &[AdapterGrad]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.v_sig.iter().chain(g.v_reg.iter()).copied()).collect()
}

fn repeat_row(row: &Array1<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, row.len()));
    out.rows_mut().into_iter().for_each(|mut r| r.assign(row));
    out
}

/// Element-mean squared error between the membrane's prediction and a fixed
/// target, plus its gradient.
fn mse_through_membrane<M: NoisePredictor + ?Sized>(
    model: &M,
    membrane: &Membrane,
    x_t: &Array2<f64>,
    cond: &Array2<f64>,
    t: &[usize],
    target: &Array2<f64>,
) -> Result<LossGrad> {
    let adapters = [Applied::new(membrane, 1.0)];
    let (pred, tape) = model.predict_taped(x_t, cond, t, &adapters)?;
    let diff = &pred - target;
    let n = diff.len() as f64;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let d_out = diff * (2.0 / n);
    let grads = model.adapter_backward(&tape, &d_out, &adapters, 0)?;
    Ok(LossGrad { value, grads: flatten(&grads) })
}

/// Erasing loss for one target, averaged over the rows of `x_t`.
pub fn erasing_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    membrane: &Membrane,
    x_t: &Array2<f64>,
    t: &[usize],
    c_tar: &ConceptEncoding,
    c_sur: &ConceptEncoding,
    eta: f64,
) -> Result<LossGrad> {
    let rows = x_t.nrows();
    let cond_tar = repeat_row(&c_tar.vector, rows);
    let cond_sur = repeat_row(&c_sur.vector, rows);
    let eps_tar = model.predict(x_t, &cond_tar, t, &[])?;
    let eps_sur = model.predict(x_t, &cond_sur, t, &[])?;
    let target = erasing_target(&eps_tar, &eps_sur, eta)?;
    mse_through_membrane(model, membrane, x_t, &cond_tar, t, &target)
}

/// Anchoring loss: mean squared deviation of the membrane-modified prediction
/// from the frozen prediction, over every anchor and every row of `x_t`.
pub fn anchoring_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    membrane: &Membrane,
    x_t: &Array2<f64>,
    t: &[usize],
    anchors: &[ConceptEncoding],
) -> Result<LossGrad> {
    if anchors.is_empty() {
        return Err(SpmError::Config("anchoring loss needs at least one anchor".into()));
    }
    let rows = x_t.nrows();
    let width = anchors[0].vector.len();
    let mut cond = Array2::zeros((rows * anchors.len(), width));
    let mut xs = Array2::zeros((rows * anchors.len(), x_t.ncols()));
    let mut ts = Vec::with_capacity(rows * anchors.len());
    for (a, anchor) in anchors.iter().enumerate() {
        for r in 0..rows {
            cond.row_mut(a * rows + r).assign(&anchor.vector);
            xs.row_mut(a * rows + r).assign(&x_t.row(r));
            ts.push(t[r]);
        }
    }
    let frozen = model.predict(&xs, &cond, &ts, &[])?;
    mse_through_membrane(model, membrane, &xs, &cond, &ts, &frozen)
}

/// Draws `t` uniformly from `t_range` and produces `x_t` by running the frozen
/// sampler from pure noise at `T` down to `t`, conditioned on `cond` (one row
/// per latent). At `t = T` the noise is returned as is.
pub fn sample_latent<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: &Array2<f64>,
    t_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<(Array2<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent_with(model, cond, t_range, &mut rng)
}

fn sample_latent_with<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Array2<f64>,
    t_range: RangeInclusive<usize>,
    rng: &mut R,
) -> Result<(Array2<f64>, usize)> {
    let max = model.schedule().steps();
    let (lo, hi) = (*t_range.start(), *t_range.end());
    if lo == 0 || lo > hi || hi > max {
        return Err(SpmError::TimestepRange { t: if hi > max { hi } else { lo }, max });
    }
    let t = rng.random_range(lo..=hi);
    let noise = standard_normal(cond.nrows(), model.sample_width(), rng);
    if t == max {
        return Ok((noise, t));
    }
    let chain: Vec<usize> = (t..=max).rev().collect();
    Ok((denoise(model, cond, &[], noise, &chain, rng)?, t))
}

/// Linear warmup followed by cosine decay with hard restarts.
pub fn learning_rate_at(step: usize, config: &TrainConfig) -> f64 {
    let base = config.learning_rate;
    if step < config.warmup_steps {
        return base * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let span = config.steps.saturating_sub(config.warmup_steps).max(1) as f64;
    let progress = (step - config.warmup_steps) as f64 / span;
    if progress >= 1.0 {
        return 0.0;
    }
    let cycles = config.restart_cycles.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * ((cycles * progress) % 1.0)).cos())
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Timestep of the first latent in the batch.
    pub t: usize,
    pub l_era: f64,
    pub l_anc: f64,
    pub total: f64,
    pub lr: f64,
}

/// Trains a fresh membrane on `model` to erase `targets`.
pub fn train_membrane<M, E>(
    model: &M,
    encoder: &E,
    targets: &[String],
    config: &TrainConfig,
    pool: Option<&AnchorPool>,
) -> Result<Membrane>
where
    M: NoisePredictor + ?Sized,
    E: TextEncoder + ?Sized,
{
    train_membrane_with(model, encoder, targets, config, pool, |_, _| Ok(()))
}

/// [`train_membrane`] with a callback invoked after every optimizer step.
pub fn train_membrane_with<M, E, F>(
    model: &M,
    encoder: &E,
    targets: &[String],
    config: &TrainConfig,
    pool: Option<&AnchorPool>,
    mut on_step: F,
) -> Result<Membrane>
where
    M: NoisePredictor + ?Sized,
    E: TextEncoder + ?Sized,
    F: FnMut(&StepRecord, &Membrane) -> Result<()>,
{
    config.validate()?;
    if targets.is_empty() {
        return Err(SpmError::Config("at least one target concept is required".into()));
    }
    let lambda = config.effective_lambda();
    let pool = match pool {
        Some(p) => Some(p),
        None if lambda > 0.0 => {
            return Err(SpmError::Config("latent anchoring is enabled but no anchor pool was given".into()))
        }
        None => None,
    };
    let t_range = match config.t_range {
        Some((lo, hi)) => lo..=hi,
        None => 1..=model.schedule().steps(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut membrane = inject(&model.signature(), config.dim, rng.next_u64())?;
    membrane.name = targets.join("+");
    membrane.targets = targets.to_vec();
    membrane.surrogate = config.surrogate.clone();
    membrane.train_meta = TrainMeta {
        eta: config.eta,
        alpha: config.alpha,
        lambda,
        steps: config.steps,
        seed: config.seed,
        anchor_samples: if lambda > 0.0 { config.anchor_samples } else { 0 },
        enable_la: config.enable_la,
    };
    if config.steps == 0 {
        return Ok(membrane);
    }

    let c_targets = targets.iter().map(|t| encoder.encode(t)).collect::<Result<Vec<_>>>()?;
    let c_sur = encoder.encode(&config.surrogate)?;
    let mut params = membrane.parameters();
    let mut opt = AdamW::new(params.len(), config.weight_decay);

    for step in 0..config.steps {
        let mut grads = vec![0.0; params.len()];
        let mut l_era = 0.0;
        let mut l_anc = 0.0;
        // targets share one anchor draw per step but get their own latent
        let anchors = match pool {
            Some(p) if lambda > 0.0 => p.sample(config.anchor_samples, &mut rng),
            _ => Vec::new(),
        };
        let mut t_first = 0;
        let scale = 1.0 / c_targets.len() as f64;
        for c_tar in &c_targets {
            // every batch row is an independent (x_t, t) draw
            let cond = repeat_row(&c_tar.vector, 1);
            let mut x_t = Array2::zeros((config.batch_size, model.sample_width()));
            let mut ts = Vec::with_capacity(config.batch_size);
            for b in 0..config.batch_size {
                let (x, t) = sample_latent_with(model, &cond, t_range.clone(), &mut rng)?;
                x_t.row_mut(b).assign(&x.row(0));
                ts.push(t);
            }
            t_first = ts[0];
            let era = erasing_loss(model, &membrane, &x_t, &ts, c_tar, &c_sur, config.eta)?;
            l_era += scale * era.value;
            grads.iter_mut().zip(&era.grads).for_each(|(g, e)| *g += scale * e);
            if !anchors.is_empty() {
                let anc = anchoring_loss(model, &membrane, &x_t, &ts, &anchors)?;
                l_anc += scale * anc.value;
                grads.iter_mut().zip(&anc.grads).for_each(|(g, a)| *g += scale * lambda * a);
            }
        }
        let total = total_loss(l_era, l_anc, lambda);
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(SpmError::Training { step, reason: format!("non-finite loss {total}") });
        }
        let lr = learning_rate_at(step, config);
        opt.step(&mut params, &grads, lr);
        membrane.set_parameters(&params)?;
        on_step(&StepRecord { step, t: t_first, l_era, l_anc, total, lr }, &membrane)?;
    }
    membrane.round_to_f32();
    Ok(membrane)
}

/// Stacks encodings into a conditioning matrix.
pub fn stack_encodings(encodings: &[ConceptEncoding]) -> Result<Array2<f64>> {
    let views: Vec<_> = encodings.iter().map(|e| e.vector.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| SpmError::Contract(format!("cannot stack encodings: {e}")))
}
