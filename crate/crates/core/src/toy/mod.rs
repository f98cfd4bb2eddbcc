//! Desk-scale conditional diffusion system used to exercise every mechanism
//! end to end: a colour × shape image domain, a fixed text encoder, a small
//! denoiser, and a concept classifier.

pub mod classifier;
pub mod data;
pub mod denoiser;
pub mod testbed;
pub mod vocab;

pub use classifier::ToyClassifier;
pub use data::{class_name, class_of, BACKGROUND, NUM_CLASSES};
pub use denoiser::{DenoiserConfig, ToyDenoiser};
pub use testbed::{build_testbed, Testbed, TestbedConfig};
pub use vocab::{ToyTextEncoder, ToyVocabulary, TEMPLATES};
