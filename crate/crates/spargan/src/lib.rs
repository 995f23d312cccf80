//! Self-paced adversarial training for multimodal few-shot classification on
//! a deterministic synthetic benchmark.
//!
//! The pipeline: a text-conditioned GAN with an auxiliary class head is
//! trained on base classes, its discriminator is adapted to novel classes and
//! finetuned on an n-shot pool, and a self-paced loop then ranks the
//! generator's own candidates, keeps the best per class and retrains on the
//! growing pool. Everything is driven by explicit seeds so that every
//! artifact byte is reproducible.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod graph;
pub mod optim;
pub mod runner;
pub mod seeding;
pub mod spl;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
