use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierTraining, ToyClassifier};
use super::data::{class_name, sample_images, DataStyle, BACKGROUND, NUM_CLASSES};
use super::denoiser::{DenoiserConfig, ToyDenoiser};
use super::vocab::{fill_template, ToyTextEncoder, ToyVocabulary, TEMPLATES};
use crate::adapter::{Applied, ModelSignature};
use crate::diffusion::{forward_diffuse_rows, sample, standard_normal, NoisePredictor, NoiseSchedule};
use crate::error::{Result, SpmError};
use crate::nn::AdamW;

pub const TESTBED_FORMAT_VERSION: u32 = 1;

/// Derives an independent stream seed from a root seed.
pub fn sub_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub seed: u64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    pub pretrain_steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub data_style: DataStyle,
    pub classifier: ClassifierTraining,
    pub classifier_style: DataStyle,
    /// Sampler steps used for generation.
    pub sampler_steps: usize,
    pub validation_per_class: usize,
    pub min_accuracy: f64,
}

impl TestbedConfig {
    pub fn with_seed(seed: u64) -> Self {
        TestbedConfig {
            seed,
            diffusion_steps: 50,
            beta_start: 2e-3,
            beta_end: 0.4,
            denoiser: DenoiserConfig::default(),
            pretrain_steps: 6000,
            batch: 64,
            learning_rate: 2e-3,
            data_style: DataStyle::default(),
            classifier: ClassifierTraining::default(),
            classifier_style: DataStyle { amp_lo: 0.7, amp_hi: 1.0, pixel_noise: 0.03 },
            sampler_steps: 50,
            validation_per_class: 24,
            min_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TestbedManifest {
    format_version: u32,
    kind: String,
    config: TestbedConfig,
    signature: ModelSignature,
    signature_digest: String,
    denoiser_digest: String,
    frozen_accuracy: f64,
    parent_digest: Option<String>,
}

/// A pre-trained toy diffusion model with its encoder and classifier.
#[derive(Debug, Clone)]
pub struct Testbed {
    pub config: TestbedConfig,
    pub encoder: ToyTextEncoder,
    pub denoiser: ToyDenoiser,
    pub classifier: ToyClassifier,
    /// Classifier accuracy on frozen-model generations.
    pub frozen_accuracy: f64,
    /// Digest of the testbed this one was fine-tuned from.
    pub parent_digest: Option<String>,
}

/// Builds the default testbed for `seed`.
pub fn build_testbed(seed: u64) -> Result<Testbed> {
    Testbed::build(TestbedConfig::with_seed(seed))
}

impl Testbed {
    pub fn build(config: TestbedConfig) -> Result<Testbed> {
        let encoder = ToyTextEncoder::new(ToyVocabulary::new(config.seed));
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end);
        let mut denoiser = ToyDenoiser::new(config.denoiser, schedule, sub_seed(config.seed, 1));
        pretrain(
            &mut denoiser,
            &encoder,
            &config.data_style,
            config.pretrain_steps,
            config.batch,
            config.learning_rate,
            sub_seed(config.seed, 2),
        )?;
        let mut classifier = ToyClassifier::new(sub_seed(config.seed, 3));
        classifier.train(&config.classifier, &config.classifier_style, sub_seed(config.seed, 4))?;
        let mut tb = Testbed { config, encoder, denoiser, classifier, frozen_accuracy: 0.0, parent_digest: None };
        tb.validate()?;
        Ok(tb)
    }

    /// Continues pre-training on a shifted data style, producing a derived
    /// checkpoint with an identical signature.
    pub fn fine_tuned_variant(&self, steps: usize, seed: u64) -> Result<Testbed> {
        let mut denoiser = self.denoiser.clone();
        let style = DataStyle { amp_lo: 0.75, amp_hi: 0.95, pixel_noise: 0.04 };
        pretrain(&mut denoiser, &self.encoder, &style, steps, self.config.batch, self.config.learning_rate * 0.25, seed)?;
        let mut tb = Testbed {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            denoiser,
            classifier: self.classifier.clone(),
            frozen_accuracy: 0.0,
            parent_digest: Some(self.denoiser.digest()),
        };
        tb.validate()?;
        Ok(tb)
    }

    pub fn signature(&self) -> ModelSignature {
        self.denoiser.signature()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.denoiser.schedule()
    }

    /// Combined digest of denoiser and classifier parameters.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.denoiser.digest().as_bytes());
        h.update(serde_json::to_vec(&self.classifier).expect("serializable"));
        hex::encode(h.finalize())
    }

    /// Samples one image per prompt with the given adapters active.
    pub fn generate(&self, prompts: &[&str], adapters: &[Applied<'_>], seed: u64) -> Result<Array2<f64>> {
        let cond = self.encoder.encode_batch(prompts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&self.denoiser, &cond, adapters, self.config.sampler_steps, &mut rng)
    }

    /// Fraction of frozen generations that the classifier labels with their
    /// conditioning class, over every concept (random templates) and the
    /// empty prompt.
    pub fn frozen_generation_accuracy(&self, per_class: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prompts = Vec::new();
        let mut labels = Vec::new();
        for class in 0..NUM_CLASSES {
            for _ in 0..per_class {
                let p = if class == BACKGROUND {
                    String::new()
                } else {
                    fill_template(TEMPLATES[rng.random_range(0..TEMPLATES.len())], &class_name(class))
                };
                prompts.push(p);
                labels.push(class);
            }
        }
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let x = self.generate(&refs, &[], rng.random())?;
        self.classifier.accuracy(&x, &labels)
    }

    fn validate(&mut self) -> Result<()> {
        let acc = self.frozen_generation_accuracy(self.config.validation_per_class, sub_seed(self.config.seed, 5))?;
        self.frozen_accuracy = acc;
        if acc < self.config.min_accuracy {
            return Err(SpmError::Testbed(format!(
                "classifier accuracy on frozen generations is {acc:.3}, below the required {:.2}",
                self.config.min_accuracy
            )));
        }
        Ok(())
    }

    /// Writes `manifest.json`, `denoiser.json` and `classifier.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let signature = self.signature();
        let manifest = TestbedManifest {
            format_version: TESTBED_FORMAT_VERSION,
            kind: "spm-toy-testbed".into(),
            config: self.config.clone(),
            signature_digest: signature.digest(),
            signature,
            denoiser_digest: self.denoiser.digest(),
            frozen_accuracy: self.frozen_accuracy,
            parent_digest: self.parent_digest.clone(),
        };
        fs::write(dir.join("denoiser.json"), serde_json::to_vec(&self.denoiser)?)?;
        fs::write(dir.join("classifier.json"), serde_json::to_vec(&self.classifier)?)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Testbed> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(SpmError::Testbed(format!("no testbed at {} (run `spm testbed build`)", dir.display())));
        }
        let manifest: TestbedManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format_version > TESTBED_FORMAT_VERSION {
            return Err(SpmError::Version { found: manifest.format_version, supported: TESTBED_FORMAT_VERSION });
        }
        let denoiser: ToyDenoiser = serde_json::from_slice(&fs::read(dir.join("denoiser.json"))?)?;
        if denoiser.digest() != manifest.denoiser_digest {
            return Err(SpmError::Testbed(format!("denoiser digest mismatch in {}", dir.display())));
        }
        let classifier: ToyClassifier = serde_json::from_slice(&fs::read(dir.join("classifier.json"))?)?;
        Ok(Testbed {
            encoder: ToyTextEncoder::new(ToyVocabulary::new(manifest.config.seed)),
            config: manifest.config,
            denoiser,
            classifier,
            frozen_accuracy: manifest.frozen_accuracy,
            parent_digest: manifest.parent_digest,
        })
    }
}

/// ε-prediction training of the host denoiser on templated concept prompts
/// (plus the empty prompt for the background class).
pub fn pretrain(
    model: &mut ToyDenoiser,
    encoder: &ToyTextEncoder,
    style: &DataStyle,
    steps: usize,
    batch: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // encodings for every (class, template) pair
    let mut table: Vec<Vec<ndarray::Array1<f64>>> = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let row = if class == BACKGROUND {
            vec![encoder.encode_batch(&[""])?.row(0).to_owned()]
        } else {
            TEMPLATES
                .iter()
                .map(|t| Ok(encoder.encode_batch(&[&fill_template(t, &class_name(class))])?.row(0).to_owned()))
                .collect::<Result<Vec<_>>>()?
        };
        table.push(row);
    }
    let total_t = model.schedule().steps();
    let mut params = model.host_parameters();
    let mut opt = AdamW::new(params.len(), 0.0);
    let warmup = (steps / 20).max(1);
    for step in 0..steps {
        let classes: Vec<usize> = (0..batch).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        let mut cond = Array2::zeros((batch, model.cond_width()));
        for (i, &c) in classes.iter().enumerate() {
            let row = &table[c][rng.random_range(0..table[c].len())];
            cond.row_mut(i).assign(row);
        }
        let x0 = sample_images(&classes, style, &mut rng);
        let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=total_t)).collect();
        let noise = standard_normal(batch, model.sample_width(), &mut rng);
        let x_t = forward_diffuse_rows(model.schedule(), &x0, &t, &noise)?;
        let (pred, tape) = model.predict_taped(&x_t, &cond, &t, &[])?;
        let diff = pred - &noise;
        let loss = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(SpmError::Testbed(format!("pre-training diverged at step {step}")));
        }
        let d_out = diff * (2.0 / (batch * model.sample_width()) as f64);
        let grads = ToyDenoiser::flatten_host_grads(&model.host_backward(&tape, &d_out)?);
        let lr = if step < warmup {
            learning_rate * (step + 1) as f64 / warmup as f64
        } else {
            let p = (step - warmup) as f64 / (steps - warmup).max(1) as f64;
            learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
        };
        opt.step(&mut params, &grads, lr);
        model.set_host_parameters(&params);
    }
    Ok(())
}
