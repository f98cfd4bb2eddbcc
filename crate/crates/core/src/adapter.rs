//! Semi-permeable membrane (SPM) adapters.
//!
//! An [`SpmLayer`] attaches a rank-`d` additive path to one host layer with
//! weight `W ∈ R^{m×n}`:
//!
//! ```text
//! y = W x + Σ_c γ_c · v_sig^c (v_reg^c x)
//! ```
//!
//! `v_sig` (`[m, d]`) is the erasing signal on the output side and `v_reg`
//! (`[d, n·k²]`) the regulator on the input side. For a convolution with kernel
//! `k`, `v_reg` is itself a `k×k` convolution producing `d` channels and
//! `v_sig` a `1×1` convolution back to `m` channels; on im2col patches both
//! collapse to the dense formula above.
//!
//! A [`Membrane`] is one adapter per injectable host layer, trained to erase a
//! set of target concepts. Membranes are immutable once trained and may be
//! overlaid on any model with an identical [`ModelSignature`].

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpmError};
use crate::nn::{self, Geometry};

/// Shape record of one injectable host layer. `kernel` is 1 for dense layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_id: String,
    pub m: usize,
    pub n: usize,
    pub kernel: usize,
}

impl LayerShape {
    pub fn new(layer_id: impl Into<String>, m: usize, n: usize, kernel: usize) -> Self {
        LayerShape { layer_id: layer_id.into(), m, n, kernel }
    }

    /// Parameter count of the host weight, `m·n·k²`.
    pub fn host_params(&self) -> usize {
        self.m * self.n * self.kernel * self.kernel
    }

    /// Columns of `v_reg`.
    pub fn fan_in(&self) -> usize {
        self.n * self.kernel * self.kernel
    }

    fn same_dims(&self, other: &LayerShape) -> bool {
        self.m == other.m && self.n == other.n && self.kernel == other.kernel
    }
}

/// Ordered list of a model's injectable layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSignature {
    layers: Vec<LayerShape>,
}

impl ModelSignature {
    pub fn new(layers: Vec<LayerShape>) -> Self {
        ModelSignature { layers }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// SHA-256 over the canonical `id\tm\tn\tk\n` listing, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for l in &self.layers {
            hasher.update(format!("{}\t{}\t{}\t{}\n", l.layer_id, l.m, l.n, l.kernel).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// `None` when compatible, otherwise a description naming the first
    /// offending layer.
    pub fn mismatch(&self, other: &ModelSignature) -> Option<String> {
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a != b {
                return Some(format!(
                    "layer #{i} `{}` ({}x{}, k={}) does not match `{}` ({}x{}, k={})",
                    a.layer_id, a.m, a.n, a.kernel, b.layer_id, b.m, b.n, b.kernel
                ));
            }
        }
        match self.layers.len().cmp(&other.layers.len()) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(format!(
                "layer `{}` is missing from the model",
                self.layers[other.layers.len()].layer_id
            )),
            std::cmp::Ordering::Less => Some(format!(
                "model layer `{}` has no adapter",
                other.layers[self.layers.len()].layer_id
            )),
        }
    }

    pub fn is_compatible(&self, other: &ModelSignature) -> bool {
        self.mismatch(other).is_none()
    }
}

/// Adapter pair for one host layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpmLayer {
    shape: LayerShape,
    v_sig: Array2<f64>,
    v_reg: Array2<f64>,
}

impl SpmLayer {
    pub fn new(shape: LayerShape, v_sig: Array2<f64>, v_reg: Array2<f64>) -> Result<Self> {
        let d = v_sig.ncols();
        if d == 0 {
            return Err(SpmError::Config(format!("layer `{}`: intrinsic dimension must be >= 1", shape.layer_id)));
        }
        if v_sig.nrows() != shape.m || v_reg.dim() != (d, shape.fan_in()) {
            return Err(SpmError::Contract(format!(
                "layer `{}`: v_sig {:?} / v_reg {:?} inconsistent with host {}x{} k={} at d={d}",
                shape.layer_id,
                v_sig.dim(),
                v_reg.dim(),
                shape.m,
                shape.n,
                shape.kernel
            )));
        }
        Ok(SpmLayer { shape, v_sig, v_reg })
    }

    pub fn layer_id(&self) -> &str {
        &self.shape.layer_id
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.v_sig.ncols()
    }

    /// `[m, d]`
    pub fn v_sig(&self) -> &Array2<f64> {
        &self.v_sig
    }

    /// `[d, n·k²]`
    pub fn v_reg(&self) -> &Array2<f64> {
        &self.v_reg
    }

    pub fn parameter_count(&self) -> usize {
        self.v_sig.len() + self.v_reg.len()
    }

    /// Dense `[m, n·k²]` update this layer adds to the host weight at γ = 1.
    pub fn delta_weight(&self) -> Array2<f64> {
        self.v_sig.dot(&self.v_reg)
    }
}

/// Hyper-parameters a membrane was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub eta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub anchor_samples: usize,
    pub enable_la: bool,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta { eta: 1.0, alpha: 1.0, lambda: 1e3, steps: 0, seed: 0, anchor_samples: 4, enable_la: true }
    }
}

/// A set of adapters, one per injectable layer of its source model.
#[derive(Debug, Clone, PartialEq)]
pub struct Membrane {
    pub name: String,
    pub targets: Vec<String>,
    pub surrogate: String,
    pub train_meta: TrainMeta,
    layers: Vec<SpmLayer>,
    source_signature: ModelSignature,
}

impl Membrane {
    /// Assembles a membrane, checking that `layers` line up with `source_signature`.
    pub fn from_parts(
        name: impl Into<String>,
        targets: Vec<String>,
        surrogate: impl Into<String>,
        train_meta: TrainMeta,
        layers: Vec<SpmLayer>,
        source_signature: ModelSignature,
    ) -> Result<Self> {
        if layers.len() != source_signature.layers().len()
            || layers.iter().zip(source_signature.layers()).any(|(l, s)| l.shape() != s)
        {
            return Err(SpmError::Contract("membrane layers do not match its source signature".into()));
        }
        Ok(Membrane {
            name: name.into(),
            targets,
            surrogate: surrogate.into(),
            train_meta,
            layers,
            source_signature,
        })
    }

    pub fn layers(&self) -> &[SpmLayer] {
        &self.layers
    }

    pub fn layer(&self, layer_id: &str) -> Option<&SpmLayer> {
        self.layers.iter().find(|l| l.layer_id() == layer_id)
    }

    pub fn source_signature(&self) -> &ModelSignature {
        &self.source_signature
    }

    /// Intrinsic dimension (shared by all layers).
    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, SpmLayer::dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(SpmLayer::parameter_count).sum()
    }

    /// Flat parameter vector: per layer, `v_sig` then `v_reg`, row-major.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.v_sig.iter());
            out.extend(l.v_reg.iter());
        }
        out
    }

    /// Inverse of [`Membrane::parameters`].
    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(SpmError::Contract(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.v_sig.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.v_reg.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            l.v_sig.mapv_inplace(|v| v as f32 as f64);
            l.v_reg.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// True while every erasing signal is exactly zero.
    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.v_sig.iter().all(|&v| v == 0.0))
    }
}

/// A membrane plus the permeability it is applied with.
#[derive(Debug, Clone, Copy)]
pub struct Applied<'a> {
    pub membrane: &'a Membrane,
    pub gamma: f64,
}

impl<'a> Applied<'a> {
    pub fn new(membrane: &'a Membrane, gamma: f64) -> Self {
        Applied { membrane, gamma }
    }
}

/// Creates an identity-at-init membrane for every layer of `signature`.
///
/// `v_sig` starts at zero; `v_reg` is Kaiming-uniform with negative slope
/// `a = √5`, i.e. `U(-1/√fan_in, 1/√fan_in)`, drawn in single precision.
pub fn inject(signature: &ModelSignature, d: usize, seed: u64) -> Result<Membrane> {
    if d == 0 {
        return Err(SpmError::Config("intrinsic dimension d must be >= 1".into()));
    }
    if signature.is_empty() {
        return Err(SpmError::Config("model signature lists no injectable layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 5f64.sqrt();
    let gain = (2.0 / (1.0 + a * a)).sqrt();
    let mut layers = Vec::with_capacity(signature.layers().len());
    for shape in signature.layers() {
        let fan_in = shape.fan_in();
        let bound = (3f64.sqrt() * gain / (fan_in as f64).sqrt()) as f32;
        let v_reg = Array2::from_shape_fn((d, fan_in), |_| rng.random_range(-bound..bound) as f64);
        let v_sig = Array2::zeros((shape.m, d));
        layers.push(SpmLayer::new(shape.clone(), v_sig, v_reg)?);
    }
    Membrane::from_parts("untrained", Vec::new(), "", TrainMeta::default(), layers, signature.clone())
}

/// Σ γ (P v_regᵀ) v_sigᵀ over adapters with non-zero γ, on patch rows.
/// `None` when nothing contributes.
pub(crate) fn intervention_rows(
    patches: &Array2<f64>,
    host: &LayerShape,
    adapters: &[(&SpmLayer, f64)],
) -> Result<Option<Array2<f64>>> {
    let mut acc: Option<Array2<f64>> = None;
    for (layer, gamma) in adapters {
        if !layer.shape.same_dims(host) {
            return Err(SpmError::Contract(format!(
                "adapter `{}` ({}x{}, k={}) applied to host `{}` ({}x{}, k={})",
                layer.shape.layer_id, layer.shape.m, layer.shape.n, layer.shape.kernel, host.layer_id, host.m, host.n, host.kernel
            )));
        }
        if *gamma == 0.0 {
            continue;
        }
        let z = patches.dot(&layer.v_reg.t());
        let term = z.dot(&layer.v_sig.t()) * *gamma;
        match acc.as_mut() {
            Some(a) => *a += &term,
            None => acc = Some(term),
        }
    }
    Ok(acc)
}

/// Adds the gated interventions of `layers` to a host layer output.
///
/// `x` is the layer input (`[batch, n·positions]`), `host_out` the frozen
/// output `Wx` (`[batch, m·positions]`). With no adapters, or all γ = 0, the
/// host output is returned unchanged.
pub fn intervened_forward(
    x: ArrayView2<f64>,
    host_out: &Array2<f64>,
    geometry: Geometry,
    layers: &[(&SpmLayer, f64)],
) -> Result<Array2<f64>> {
    let Some((first, _)) = layers.first() else {
        return Ok(host_out.clone());
    };
    let shape = first.shape().clone();
    let positions = geometry.positions();
    if shape.kernel != geometry.kernel()
        || x.ncols() != shape.n * positions
        || host_out.dim() != (x.nrows(), shape.m * positions)
    {
        return Err(SpmError::Contract(format!(
            "input {:?} / host output {:?} inconsistent with adapter `{}` ({}x{}, k={})",
            x.dim(),
            host_out.dim(),
            shape.layer_id,
            shape.m,
            shape.n,
            shape.kernel
        )));
    }
    let patches = match geometry {
        Geometry::Linear => x.to_owned(),
        Geometry::Conv { kernel, height, width } => nn::im2col(x, shape.n, kernel, height, width),
    };
    let mut out = host_out.clone();
    if let Some(delta) = intervention_rows(&patches, &shape, layers)? {
        out += &nn::rows_to_volume(&delta, x.nrows(), positions);
    }
    Ok(out)
}

/// Adapter parameters relative to host weights: `Σ d(m + n·k²) / Σ m·n·k²`.
pub fn overhead_ratio(membrane: &Membrane) -> f64 {
    signature_overhead(membrane.source_signature(), membrane.dim())
}

/// [`overhead_ratio`] for a hypothetical membrane of dimension `d` on `signature`.
pub fn signature_overhead(signature: &ModelSignature, d: usize) -> f64 {
    let host: usize = signature.layers().iter().map(LayerShape::host_params).sum();
    if host == 0 {
        return 0.0;
    }
    let adapter: usize = signature.layers().iter().map(|l| d * (l.m + l.fan_in())).sum();
    adapter as f64 / host as f64
}
