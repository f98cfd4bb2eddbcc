//! Variance-preserving DDPM machinery shared by the trainer and the toy backbone.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{Applied, ModelSignature};
use crate::error::{Result, SpmError};
use crate::nn::AdapterGrad;

/// Conditional noise predictor `ε(x_t, c, t | θ [, membranes])`.
///
/// Frozen evaluation is a call with an empty adapter list; it must never
/// depend on membrane parameters.
pub trait NoisePredictor {
    /// Activations retained for [`NoisePredictor::adapter_backward`].
    type Tape;

    fn signature(&self) -> ModelSignature;

    fn schedule(&self) -> &NoiseSchedule;

    /// Width of one flattened sample.
    fn sample_width(&self) -> usize;

    /// Width of one conditioning row.
    fn cond_width(&self) -> usize;

    fn predict_taped(
        &self,
        x_t: &Array2<f64>,
        cond: &Array2<f64>,
        t: &[usize],
        adapters: &[Applied<'_>],
    ) -> Result<(Array2<f64>, Self::Tape)>;

    /// Vector-Jacobian product of the prediction w.r.t. the parameters of
    /// `adapters[trainable]`, one entry per layer in signature order.
    fn adapter_backward(
        &self,
        tape: &Self::Tape,
        d_out: &Array2<f64>,
        adapters: &[Applied<'_>],
        trainable: usize,
    ) -> Result<Vec<AdapterGrad>>;

    fn predict(&self, x_t: &Array2<f64>, cond: &Array2<f64>, t: &[usize], adapters: &[Applied<'_>]) -> Result<Array2<f64>> {
        Ok(self.predict_taped(x_t, cond, t, adapters)?.0)
    }
}

/// Linear-β noise schedule; `alpha_bar[0] = 1` so `t = 0` is clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Clamp for predicted `x0` during sampling (`None` disables).
    pub clip_x0: Option<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 1);
        let mut betas = vec![0.0];
        let mut alpha_bars = vec![1.0];
        for i in 0..steps {
            let frac = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            betas.push(beta);
            alpha_bars.push(alpha_bars[i] * (1.0 - beta));
        }
        NoiseSchedule { betas, alpha_bars, clip_x0: Some(1.0) }
    }

    /// Number of noise levels `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(SpmError::TimestepRange { t, max: self.steps() })
    }

    /// Evenly spaced descending timesteps `T = t_0 > … > t_{k-1} >= 1`, then 0.
    pub fn spaced_timesteps(&self, steps: usize) -> Vec<usize> {
        let total = self.steps();
        let steps = steps.clamp(1, total);
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| total - (i * total) / steps)
            .collect();
        ts.dedup();
        ts.push(0);
        ts
    }
}

/// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε`.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &Array2<f64>, t: usize, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if x0.dim() != noise.dim() {
        return Err(SpmError::Contract(format!("x0 {:?} vs noise {:?}", x0.dim(), noise.dim())));
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(noise).map_collect(|&x, &e| a * x + b * e))
}

/// Per-row timesteps variant of [`forward_diffuse`].
pub fn forward_diffuse_rows(schedule: &NoiseSchedule, x0: &Array2<f64>, t: &[usize], noise: &Array2<f64>) -> Result<Array2<f64>> {
    if x0.dim() != noise.dim() || t.len() != x0.nrows() {
        return Err(SpmError::Contract("forward_diffuse_rows: shape mismatch".into()));
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(ti)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(out.row_mut(i)).and(noise.row(i)).for_each(|o, &e| *o = a * *o + b * e);
    }
    Ok(out)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Ancestral denoising from `x` at `timesteps[0]` through each subsequent
/// (lower) timestep. Noise is injected on every transition that does not end
/// at 0.
pub fn denoise<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Array2<f64>,
    adapters: &[Applied<'_>],
    x: Array2<f64>,
    timesteps: &[usize],
    rng: &mut R,
) -> Result<Array2<f64>> {
    denoise_with(model.schedule(), x, timesteps, rng, |x, t| model.predict(x, cond, t, adapters))
}

/// [`denoise`] with an arbitrary noise predictor `predict(x_t, t)`.
pub fn denoise_with<R, F>(schedule: &NoiseSchedule, mut x: Array2<f64>, timesteps: &[usize], rng: &mut R, mut predict: F) -> Result<Array2<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&Array2<f64>, &[usize]) -> Result<Array2<f64>>,
{
    let batch = x.nrows();
    for pair in timesteps.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        if t_prev >= t {
            return Err(SpmError::Contract(format!("timesteps must descend: {t} -> {t_prev}")));
        }
        let ab_t = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let eps = predict(&x, &vec![t; batch])?;
        let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let mut x0 = Zip::from(&x).and(&eps).map_collect(|&xt, &e| (xt - sb * e) / sa);
        if let Some(c) = schedule.clip_x0 {
            x0.mapv_inplace(|v| v.clamp(-c, c));
        }
        let beta = 1.0 - ab_t / ab_prev;
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let coef_xt = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mut mean = Zip::from(&x0).and(&x).map_collect(|&a, &b| coef_x0 * a + coef_xt * b);
        if t_prev > 0 {
            let std = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
            mean.zip_mut_with(&standard_normal(batch, x.ncols(), rng), |m, &z| *m += std * z);
        }
        x = mean;
    }
    Ok(x)
}

/// Draws samples conditioned on `cond` (one row per sample) with `steps`
/// evenly spaced sampler steps.
pub fn sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Array2<f64>,
    adapters: &[Applied<'_>],
    steps: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let x_t = standard_normal(cond.nrows(), model.sample_width(), rng);
    denoise(model, cond, adapters, x_t, &model.schedule().spaced_timesteps(steps), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::linear(50, 2e-3, 0.4);
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(50).unwrap() < 1e-4);
        assert!(matches!(s.alpha_bar(51), Err(SpmError::TimestepRange { .. })));
    }

    #[test]
    fn forward_at_zero_is_identity_and_rejects_out_of_range() {
        let s = NoiseSchedule::linear(10, 1e-2, 0.3);
        let x0 = Array2::from_elem((2, 3), 0.7);
        let noise = Array2::from_elem((2, 3), -1.3);
        assert_eq!(forward_diffuse(&s, &x0, 0, &noise).unwrap(), x0);
        assert!(forward_diffuse(&s, &x0, 11, &noise).is_err());
    }

    #[test]
    fn forward_at_t_max_is_dominated_by_noise() {
        let s = NoiseSchedule::linear(50, 2e-3, 0.4);
        let ab = s.alpha_bar(50).unwrap();
        let noise = Array2::from_elem((1, 2), 1.0);
        let a = forward_diffuse(&s, &Array2::from_elem((1, 2), 1.0), 50, &noise).unwrap();
        let b = forward_diffuse(&s, &Array2::from_elem((1, 2), -1.0), 50, &noise).unwrap();
        // difference is exactly the schedule weight on x0
        assert!(((a[[0, 0]] - b[[0, 0]]) - 2.0 * ab.sqrt()).abs() < 1e-12);
        assert!(ab.sqrt() < 1e-2);
    }

    #[test]
    fn forward_marginals_match_closed_form() {
        let s = NoiseSchedule::linear(50, 2e-3, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        for t in [1usize, 10, 25, 50] {
            let x0 = Array2::from_elem((n, 1), 0.8);
            let noise = standard_normal(n, 1, &mut rng);
            let xt = forward_diffuse(&s, &x0, t, &noise).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let (mu, var) = (ab.sqrt() * 0.8, 1.0 - ab);
            let mean = xt.mean().unwrap();
            let emp_var = xt.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
            assert!((mean - mu).abs() < 3.0 * (var / n as f64).sqrt(), "t={t}");
            // sd of the sample variance is ~ var*sqrt(2/(n-1))
            assert!((emp_var - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt(), "t={t}");
        }
    }

    #[test]
    fn spaced_timesteps_descend_to_zero() {
        let s = NoiseSchedule::linear(50, 2e-3, 0.4);
        assert_eq!(s.spaced_timesteps(50), (0..=50).rev().collect::<Vec<_>>());
        let ts = s.spaced_timesteps(10);
        assert_eq!(ts.len(), 11);
        assert_eq!(ts[0], 50);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}
