//! Small conditional noise-prediction network.
//!
//! ```text
//! h1  = silu(conv_in(x))                          2 -> C channels, 3x3
//! h2  = silu(down(h1) + cond_down(ctx))           C·36 -> H
//! h3  = silu(mid(h2) + cond_mid(ctx)) + h2        H -> H
//! h4  = silu(up(h3)) + h1                         H -> C·36
//! eps = conv_out(h4)                              C -> 2 channels, 3x3
//! ```
//!
//! `ctx` is the pooled text encoding concatenated with a sinusoidal
//! embedding of `t / T`. All seven layers are injectable.

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{CHANNELS, SIDE};
use crate::adapter::{Applied, ModelSignature, SpmLayer};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Result, SpmError};
use crate::nn::{silu, silu_grad, AdapterGrad, Geometry, HostGrad, HostLayer, LayerCache};

pub const TIME_DIM: usize = 8;

pub const LAYER_IDS: [&str; 7] = ["conv_in", "down", "cond_down", "mid", "cond_mid", "up", "conv_out"];
const CONV_IN: usize = 0;
const DOWN: usize = 1;
const COND_DOWN: usize = 2;
const MID: usize = 3;
const COND_MID: usize = 4;
const UP: usize = 5;
const CONV_OUT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub hidden: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { channels: 8, hidden: 64, cond_dim: super::vocab::ENCODING_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    layers: Vec<HostLayer>,
}

/// Forward activations needed for backpropagation.
#[derive(Debug)]
pub struct DenoiserTape {
    caches: Vec<LayerCache>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    a3: Array2<f64>,
    a4: Array2<f64>,
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Geometry::Conv { kernel: 3, height: SIDE, width: SIDE };
        let (c, h) = (config.channels, config.hidden);
        let spatial = c * SIDE * SIDE;
        let ctx = config.cond_dim + TIME_DIM;
        let layers = vec![
            HostLayer::new(LAYER_IDS[CONV_IN], CHANNELS, c, conv, &mut rng),
            HostLayer::new(LAYER_IDS[DOWN], spatial, h, Geometry::Linear, &mut rng),
            HostLayer::new(LAYER_IDS[COND_DOWN], ctx, h, Geometry::Linear, &mut rng),
            HostLayer::new(LAYER_IDS[MID], h, h, Geometry::Linear, &mut rng),
            HostLayer::new(LAYER_IDS[COND_MID], ctx, h, Geometry::Linear, &mut rng),
            HostLayer::new(LAYER_IDS[UP], h, spatial, Geometry::Linear, &mut rng),
            HostLayer::new(LAYER_IDS[CONV_OUT], c, CHANNELS, conv, &mut rng),
        ];
        ToyDenoiser { config, schedule, layers }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layers(&self) -> &[HostLayer] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(HostLayer::parameter_count).sum()
    }

    /// SHA-256 over every host parameter's little-endian bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.id.as_bytes());
            for v in l.weight.iter().chain(l.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn time_embedding(&self, t: &[usize]) -> Array2<f64> {
        let total = self.schedule.steps() as f64;
        let mut out = Array2::zeros((t.len(), TIME_DIM));
        for (i, &ti) in t.iter().enumerate() {
            let x = ti as f64 / total;
            for k in 0..TIME_DIM / 2 {
                let f = std::f64::consts::PI * 0.5 * (1 << k) as f64;
                out[[i, 2 * k]] = (f * x).sin();
                out[[i, 2 * k + 1]] = (f * x).cos();
            }
        }
        out
    }

    /// Adapters attached to layer `i`, paired with their γ.
    fn layer_adapters<'a>(&self, i: usize, adapters: &[Applied<'a>]) -> Result<Vec<(&'a SpmLayer, f64)>> {
        adapters
            .iter()
            .map(|a| {
                let l = a.membrane.layers().get(i).filter(|l| l.layer_id() == self.layers[i].id).ok_or_else(|| {
                    SpmError::Incompatible {
                        membrane: a.membrane.name.clone(),
                        report: format!("no adapter for layer `{}` at position {i}", self.layers[i].id),
                    }
                })?;
                Ok((l, a.gamma))
            })
            .collect()
    }

    fn check_inputs(&self, x_t: &Array2<f64>, cond: &Array2<f64>, t: &[usize]) -> Result<()> {
        let batch = x_t.nrows();
        if x_t.ncols() != self.sample_width() || cond.dim() != (batch, self.config.cond_dim) || t.len() != batch {
            return Err(SpmError::Contract(format!(
                "denoiser inputs x {:?}, cond {:?}, t {} do not match (width {}, cond {})",
                x_t.dim(),
                cond.dim(),
                t.len(),
                self.sample_width(),
                self.config.cond_dim
            )));
        }
        if let Some(&bad) = t.iter().find(|&&v| v > self.schedule.steps()) {
            return Err(SpmError::TimestepRange { t: bad, max: self.schedule.steps() });
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        x_t: &Array2<f64>,
        cond: &Array2<f64>,
        t: &[usize],
        adapters: &[Applied<'_>],
    ) -> Result<(Array2<f64>, DenoiserTape)> {
        self.check_inputs(x_t, cond, t)?;
        let ctx = concatenate(Axis(1), &[cond.view(), self.time_embedding(t).view()]).expect("same batch");
        let ad = |i| self.layer_adapters(i, adapters);
        let l = &self.layers;

        let (a1, c0) = l[CONV_IN].forward(x_t.view(), &ad(CONV_IN)?)?;
        let h1 = silu(&a1);
        let (down, c1) = l[DOWN].forward(h1.view(), &ad(DOWN)?)?;
        let (cdown, c2) = l[COND_DOWN].forward(ctx.view(), &ad(COND_DOWN)?)?;
        let a2 = down + cdown;
        let h2 = silu(&a2);
        let (mid, c3) = l[MID].forward(h2.view(), &ad(MID)?)?;
        let (cmid, c4) = l[COND_MID].forward(ctx.view(), &ad(COND_MID)?)?;
        let a3 = mid + cmid;
        let h3 = silu(&a3) + &h2;
        let (a4, c5) = l[UP].forward(h3.view(), &ad(UP)?)?;
        let h4 = silu(&a4) + &h1;
        let (out, c6) = l[CONV_OUT].forward(h4.view(), &ad(CONV_OUT)?)?;
        Ok((out, DenoiserTape { caches: vec![c0, c1, c2, c3, c4, c5, c6], a1, a2, a3, a4 }))
    }

    /// Shared backward pass; collects host and/or adapter gradients per layer.
    fn backward_inner(
        &self,
        tape: &DenoiserTape,
        d_out: &Array2<f64>,
        adapters: &[Applied<'_>],
        want_host: bool,
        trainable: Option<usize>,
    ) -> Result<(Vec<Option<HostGrad>>, Vec<Option<AdapterGrad>>)> {
        let mut host = vec![None, None, None, None, None, None, None];
        let mut adapter = vec![None, None, None, None, None, None, None];
        let l = &self.layers;
        let mut step = |i: usize, d: &Array2<f64>| -> Result<Array2<f64>> {
            let ads = self.layer_adapters(i, adapters)?;
            let (dx, h, a) = l[i].backward(&tape.caches[i], d, &ads, want_host, trainable);
            host[i] = h;
            adapter[i] = a;
            Ok(dx)
        };

        let d_h4 = step(CONV_OUT, d_out)?;
        let d_a4 = &d_h4 * &silu_grad(&tape.a4);
        let mut d_h1 = d_h4;
        let d_h3 = step(UP, &d_a4)?;
        let d_a3 = &d_h3 * &silu_grad(&tape.a3);
        let mut d_h2 = d_h3;
        d_h2 += &step(MID, &d_a3)?;
        step(COND_MID, &d_a3)?;
        let d_a2 = &d_h2 * &silu_grad(&tape.a2);
        d_h1 += &step(DOWN, &d_a2)?;
        step(COND_DOWN, &d_a2)?;
        let d_a1 = &d_h1 * &silu_grad(&tape.a1);
        step(CONV_IN, &d_a1)?;
        Ok((host, adapter))
    }

    /// Gradient of `<d_out, ε>` w.r.t. every host parameter (frozen forward).
    pub fn host_backward(&self, tape: &DenoiserTape, d_out: &Array2<f64>) -> Result<Vec<HostGrad>> {
        let (host, _) = self.backward_inner(tape, d_out, &[], true, None)?;
        Ok(host.into_iter().map(|h| h.expect("host grads requested")).collect())
    }

    /// Flat host parameters: per layer, weight then bias.
    pub fn host_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_host_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.parameter_count());
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
    }

    pub fn flatten_host_grads(grads: &[HostGrad]) -> Vec<f64> {
        grads.iter().flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied().collect::<Vec<_>>()).collect()
    }
}

impl NoisePredictor for ToyDenoiser {
    type Tape = DenoiserTape;

    fn signature(&self) -> ModelSignature {
        ModelSignature::new(self.layers.iter().map(HostLayer::shape).collect())
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn sample_width(&self) -> usize {
        CHANNELS * SIDE * SIDE
    }

    fn cond_width(&self) -> usize {
        self.config.cond_dim
    }

    fn predict_taped(
        &self,
        x_t: &Array2<f64>,
        cond: &Array2<f64>,
        t: &[usize],
        adapters: &[Applied<'_>],
    ) -> Result<(Array2<f64>, DenoiserTape)> {
        self.forward_inner(x_t, cond, t, adapters)
    }

    fn adapter_backward(
        &self,
        tape: &DenoiserTape,
        d_out: &Array2<f64>,
        adapters: &[Applied<'_>],
        trainable: usize,
    ) -> Result<Vec<AdapterGrad>> {
        if trainable >= adapters.len() {
            return Err(SpmError::Contract(format!("trainable adapter {trainable} out of {}", adapters.len())));
        }
        let (_, grads) = self.backward_inner(tape, d_out, adapters, false, Some(trainable))?;
        Ok(grads.into_iter().map(|g| g.expect("adapter grads requested")).collect())
    }
}
