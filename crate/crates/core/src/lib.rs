//! Contrastive node-text pre-training on text-attributed graphs, with
//! perturbation, text-bank matching and semantic-negation objectives, and
//! prompt-based few- and zero-shot node classification.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pretrain;
pub mod prompting;
pub mod rng;
pub mod tag;
pub mod text;

pub use error::{Error, Result};
