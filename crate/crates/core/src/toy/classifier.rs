//! Concept classifier used for the CS / CER / drift analogues.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{sample_images, DataStyle, NUM_CLASSES, SAMPLE_WIDTH};
use crate::diffusion::standard_normal;
use crate::error::Result;
use crate::nn::{AdamW, Geometry, HostLayer};

pub const FEATURE_DIM: usize = 64;

/// One-hidden-layer tanh MLP over raw pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    hidden: HostLayer,
    head: HostLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Upper bound of the per-sample extra pixel noise used as augmentation.
    pub max_aug_noise: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining { steps: 1500, batch: 64, learning_rate: 3e-3, max_aug_noise: 0.2 }
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

impl ToyClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyClassifier {
            hidden: HostLayer::new("cls_hidden", SAMPLE_WIDTH, FEATURE_DIM, Geometry::Linear, &mut rng),
            head: HostLayer::new("cls_head", FEATURE_DIM, NUM_CLASSES, Geometry::Linear, &mut rng),
        }
    }

    /// Hidden-layer activations, the embedding used for drift.
    pub fn features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.hidden.host_forward(x.view())?.mapv(f64::tanh))
    }

    pub fn probabilities(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let f = self.features(x)?;
        Ok(softmax_rows(&self.head.host_forward(f.view())?))
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
            .collect())
    }

    /// Cross-entropy training on fresh clean samples with noise augmentation.
    pub fn train(&mut self, cfg: &ClassifierTraining, style: &DataStyle, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_hidden = self.hidden.parameter_count();
        let mut params: Vec<f64> = self.flat();
        let mut opt = AdamW::new(params.len(), 0.0);
        for step in 0..cfg.steps {
            let classes: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
            let mut x = sample_images(&classes, style, &mut rng);
            let noise = standard_normal(cfg.batch, SAMPLE_WIDTH, &mut rng);
            for (mut row, n) in x.rows_mut().into_iter().zip(noise.rows()) {
                let s = rng.random_range(0.0..cfg.max_aug_noise);
                row.scaled_add(s, &n);
            }
            let (pre, hc) = self.hidden.forward(x.view(), &[])?;
            let feat = pre.mapv(f64::tanh);
            let (logits, oc) = self.head.forward(feat.view(), &[])?;
            let mut d_logits = softmax_rows(&logits);
            for (i, &c) in classes.iter().enumerate() {
                d_logits[[i, c]] -= 1.0;
            }
            d_logits /= cfg.batch as f64;
            let (d_feat, g_head, _) = self.head.backward(&oc, &d_logits, &[], true, None);
            let d_pre = d_feat * &feat.mapv(|v| 1.0 - v * v);
            let (_, g_hidden, _) = self.hidden.backward(&hc, &d_pre, &[], true, None);
            let (gh, go) = (g_hidden.unwrap(), g_head.unwrap());
            let grads: Vec<f64> = gh
                .weight
                .iter()
                .chain(gh.bias.iter())
                .chain(go.weight.iter())
                .chain(go.bias.iter())
                .copied()
                .collect();
            let progress = step as f64 / cfg.steps as f64;
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.step(&mut params, &grads, lr);
            self.set_flat(&params, n_hidden);
        }
        Ok(())
    }

    fn flat(&self) -> Vec<f64> {
        [&self.hidden, &self.head]
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    fn set_flat(&mut self, p: &[f64], n_hidden: usize) {
        let (a, b) = p.split_at(n_hidden);
        for (layer, src) in [(&mut self.hidden, a), (&mut self.head, b)] {
            let nw = layer.weight.len();
            layer.weight.iter_mut().zip(&src[..nw]).for_each(|(d, s)| *d = *s);
            layer.bias.iter_mut().zip(&src[nw..]).for_each(|(d, s)| *d = *s);
        }
    }

    /// Accuracy on `x` against `labels`.
    pub fn accuracy(&self, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    /// Mean probability assigned to `class`.
    pub fn mean_confidence(&self, x: &Array2<f64>, class: usize) -> Result<f64> {
        let p = self.probabilities(x)?;
        Ok(p.column(class).mean().unwrap_or(0.0))
    }
}

/// Class histogram of predictions.
pub fn label_histogram(labels: &[usize]) -> Array1<usize> {
    let mut h = Array1::zeros(NUM_CLASSES);
    for &l in labels {
        h[l] += 1;
    }
    h
}
