//! Concept erasure for conditional diffusion models with semi-permeable
//! membrane (SPM) adapters.
//!
//! The crate covers the whole workflow:
//!
//! * [`adapter`]: one-dimensional (or rank-`d`) adapters injected into every
//!   linear and convolution layer of a denoiser, and their additive overlay.
//! * [`concept`]: text-encoder abstraction and the anchor sampling
//!   distribution used by Latent Anchoring.
//! * [`trainer`]: the erasing loss, the anchoring loss and the training loop.
//! * [`gating`]: Facilitated Transport, the prompt-conditioned permeability.
//! * [`registry`]: membrane files, compatibility checks and composition.
//! * [`eval`]: concept score, erasure rate and drift metrics.
//! * [`toy`]: a small self-contained diffusion testbed.

pub mod adapter;
pub mod concept;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gating;
pub mod nn;
pub mod registry;
pub mod toy;
pub mod trainer;

pub use adapter::{inject, intervened_forward, overhead_ratio, Applied, LayerShape, Membrane, ModelSignature, SpmLayer, TrainMeta};
pub use concept::{AnchorPool, ConceptEncoding, TextEncoder, Tokenizer};
pub use diffusion::{NoisePredictor, NoiseSchedule};
pub use error::{ErrorCategory, Result, SpmError};
pub use gating::{permeability, GateConfig, GateReport};
pub use registry::{compose, ComposedModel, MembraneFile};
pub use trainer::{train_membrane, TrainConfig};
