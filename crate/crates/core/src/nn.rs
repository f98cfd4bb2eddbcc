//! Minimal dense / convolutional layers with hand-written backward passes.
//!
//! Activations are batched row-major `Array2<f64>`: one row per sample. For
//! convolutional layers a row holds a `[channels, height, width]` volume in
//! channel-major order. Every convolution is stride 1 with "same" zero padding,
//! which lets both layer kinds share one code path: a convolution is a dense
//! map applied to im2col patches.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{LayerShape, SpmLayer};
use crate::error::{Result, SpmError};

/// Spatial realization of a host layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Linear,
    Conv { kernel: usize, height: usize, width: usize },
}

impl Geometry {
    pub fn kernel(&self) -> usize {
        match self {
            Geometry::Linear => 1,
            Geometry::Conv { kernel, .. } => *kernel,
        }
    }

    /// Number of spatial positions a single sample expands to.
    pub fn positions(&self) -> usize {
        match self {
            Geometry::Linear => 1,
            Geometry::Conv { height, width, .. } => height * width,
        }
    }
}

/// Expand `x` (`[batch, channels*h*w]`) into patch rows `[batch*h*w, channels*k*k]`.
pub fn im2col(x: ArrayView2<f64>, channels: usize, kernel: usize, height: usize, width: usize) -> Array2<f64> {
    let batch = x.nrows();
    let hw = height * width;
    let kk = kernel * kernel;
    let pad = (kernel / 2) as isize;
    let mut out = Array2::<f64>::zeros((batch * hw, channels * kk));
    for b in 0..batch {
        let row = x.row(b);
        for y in 0..height {
            for xx in 0..width {
                let r = b * hw + y * width + xx;
                let mut dst = out.row_mut(r);
                for c in 0..channels {
                    for ky in 0..kernel {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= width as isize {
                                continue;
                            }
                            dst[c * kk + ky * kernel + kx] =
                                row[c * hw + sy as usize * width + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input volume.
pub fn col2im(cols: ArrayView2<f64>, batch: usize, channels: usize, kernel: usize, height: usize, width: usize) -> Array2<f64> {
    let hw = height * width;
    let kk = kernel * kernel;
    let pad = (kernel / 2) as isize;
    let mut out = Array2::<f64>::zeros((batch, channels * hw));
    for b in 0..batch {
        let mut dst = out.row_mut(b);
        for y in 0..height {
            for xx in 0..width {
                let src = cols.row(b * hw + y * width + xx);
                for c in 0..channels {
                    for ky in 0..kernel {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= width as isize {
                                continue;
                            }
                            dst[c * hw + sy as usize * width + sx as usize] += src[c * kk + ky * kernel + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[batch*positions, channels]` -> `[batch, channels*positions]`.
pub fn rows_to_volume(rows: &Array2<f64>, batch: usize, positions: usize) -> Array2<f64> {
    if positions == 1 {
        return rows.clone();
    }
    let channels = rows.ncols();
    let mut out = Array2::<f64>::zeros((batch, channels * positions));
    for b in 0..batch {
        for p in 0..positions {
            let src = rows.row(b * positions + p);
            for c in 0..channels {
                out[[b, c * positions + p]] = src[c];
            }
        }
    }
    out
}

/// Inverse of [`rows_to_volume`].
pub fn volume_to_rows(vol: &Array2<f64>, channels: usize, positions: usize) -> Array2<f64> {
    if positions == 1 {
        return vol.clone();
    }
    let batch = vol.nrows();
    let mut out = Array2::<f64>::zeros((batch * positions, channels));
    for b in 0..batch {
        for p in 0..positions {
            for c in 0..channels {
                out[[b * positions + p, c]] = vol[[b, c * positions + p]];
            }
        }
    }
    out
}

/// Gradients of one adapter's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub v_sig: Array2<f64>,
    pub v_reg: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HostGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// A frozen-able host layer: dense or stride-1 "same" convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostLayer {
    pub id: String,
    pub geometry: Geometry,
    in_features: usize,
    /// `[m, n*k*k]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Activations a layer keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    patches: Array2<f64>,
    batch: usize,
}

impl HostLayer {
    /// PyTorch-style default init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new<R: Rng + ?Sized>(id: &str, in_features: usize, out_features: usize, geometry: Geometry, rng: &mut R) -> Self {
        let k = geometry.kernel();
        let fan_in = in_features * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_features, fan_in), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(out_features, |_| rng.random_range(-bound..bound));
        HostLayer { id: id.to_string(), geometry, in_features, weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            layer_id: self.id.clone(),
            m: self.out_features(),
            n: self.in_features,
            kernel: self.geometry.kernel(),
        }
    }

    /// Width of a flattened input row.
    pub fn input_width(&self) -> usize {
        self.in_features * self.geometry.positions()
    }

    pub fn output_width(&self) -> usize {
        self.out_features() * self.geometry.positions()
    }

    pub(crate) fn patches(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_width() {
            return Err(SpmError::Contract(format!(
                "layer `{}` expects input width {}, got {}",
                self.id,
                self.input_width(),
                x.ncols()
            )));
        }
        Ok(match self.geometry {
            Geometry::Linear => x.to_owned(),
            Geometry::Conv { kernel, height, width } => im2col(x, self.in_features, kernel, height, width),
        })
    }

    /// Frozen output `Wx + b` in volume layout.
    pub fn host_forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let patches = self.patches(x)?;
        Ok(self.host_from_patches(&patches, x.nrows()))
    }

    fn host_from_patches(&self, patches: &Array2<f64>, batch: usize) -> Array2<f64> {
        let mut rows = patches.dot(&self.weight.t());
        rows += &self.bias;
        rows_to_volume(&rows, batch, self.geometry.positions())
    }

    /// Host output plus every adapter's gated contribution.
    pub fn forward(&self, x: ArrayView2<f64>, adapters: &[(&SpmLayer, f64)]) -> Result<(Array2<f64>, LayerCache)> {
        let patches = self.patches(x)?;
        let batch = x.nrows();
        let mut out = self.host_from_patches(&patches, batch);
        if let Some(delta) = crate::adapter::intervention_rows(&patches, &self.shape(), adapters)? {
            out += &rows_to_volume(&delta, batch, self.geometry.positions());
        }
        Ok((out, LayerCache { patches, batch }))
    }

    /// Backpropagates `d_out` through the layer.
    ///
    /// Returns the input gradient, the host parameter gradient when
    /// `want_host` is set, and the gradient of the adapter at index
    /// `trainable` (if any).
    pub fn backward(
        &self,
        cache: &LayerCache,
        d_out: &Array2<f64>,
        adapters: &[(&SpmLayer, f64)],
        want_host: bool,
        trainable: Option<usize>,
    ) -> (Array2<f64>, Option<HostGrad>, Option<AdapterGrad>) {
        let positions = self.geometry.positions();
        let d_rows = volume_to_rows(d_out, self.out_features(), positions);
        let mut d_patches = d_rows.dot(&self.weight);
        let host = want_host.then(|| HostGrad {
            weight: d_rows.t().dot(&cache.patches),
            bias: d_rows.sum_axis(Axis(0)),
        });
        let mut adapter_grad = None;
        for (j, (layer, gamma)) in adapters.iter().enumerate() {
            let is_trainable = trainable == Some(j);
            if *gamma == 0.0 {
                if is_trainable {
                    adapter_grad = Some(AdapterGrad {
                        v_sig: Array2::zeros(layer.v_sig().raw_dim()),
                        v_reg: Array2::zeros(layer.v_reg().raw_dim()),
                    });
                }
                continue;
            }
            let z = cache.patches.dot(&layer.v_reg().t());
            let d_z = d_rows.dot(layer.v_sig()) * *gamma;
            d_patches += &d_z.dot(layer.v_reg());
            if is_trainable {
                adapter_grad = Some(AdapterGrad {
                    v_sig: d_rows.t().dot(&z) * *gamma,
                    v_reg: d_z.t().dot(&cache.patches),
                });
            }
        }
        let d_x = match self.geometry {
            Geometry::Linear => d_patches,
            Geometry::Conv { kernel, height, width } => {
                col2im(d_patches.view(), cache.batch, self.in_features, kernel, height, width)
            }
        };
        (d_x, host, adapter_grad)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// d/dx silu(x) evaluated at the pre-activation `x`.
pub fn silu_grad(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| {
        let s = 1.0 / (1.0 + (-v).exp());
        s * (1.0 + v * (1.0 - s))
    })
}

/// AdamW with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, k, h, w, b) = (2, 3, 4, 5, 2);
        let x = Array2::from_shape_fn((b, c * h * w), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((b * h * w, c * k * k), |_| rng.random_range(-1.0..1.0));
        let lhs = (&im2col(x.view(), c, k, h, w) * &y).sum();
        let rhs = (&x * &col2im(y.view(), b, c, k, h, w)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geometry = Geometry::Conv { kernel: 3, height: 4, width: 4 };
        let layer = HostLayer::new("c", 2, 3, geometry, &mut rng);
        let x = Array2::from_shape_fn((1, 2 * 16), |_| rng.random_range(-1.0..1.0));
        let y = layer.host_forward(x.view()).unwrap();
        for o in 0..3 {
            for py in 0..4i32 {
                for px in 0..4i32 {
                    let mut acc = layer.bias[o];
                    for c in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (sy, sx) = (py + ky - 1, px + kx - 1);
                                if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                    acc += layer.weight[[o, c * 9 + (ky * 3 + kx) as usize]]
                                        * x[[0, c * 16 + (sy * 4 + sx) as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, o * 16 + (py * 4 + px) as usize]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_input_width_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = HostLayer::new("l", 3, 2, Geometry::Linear, &mut rng);
        let x = Array2::zeros((1, 4));
        assert!(matches!(layer.host_forward(x.view()), Err(SpmError::Contract(_))));
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g, 1e-2);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }
}
