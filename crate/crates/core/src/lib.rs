//! Self-discovered anatomical visual words for self-supervised pre-training.
//!
//! The crate covers the whole pipeline at desk scale: synthetic phantom
//! cohorts ([`phantom`]), autoencoder-driven discovery of visual words
//! ([`discovery`]), appearance perturbations ([`perturb`]), joint
//! self-classification / self-restoration pre-training and baseline
//! pretext tasks ([`pretrain`]), and a transfer-learning evaluation harness
//! ([`transfer`]). Everything runs on a small reverse-mode autograd engine
//! ([`tensor`]).

pub mod artifact;
pub mod cli;
pub mod discovery;
pub mod error;
pub mod grid;
pub mod perturb;
pub mod phantom;
pub mod pretrain;
pub mod seed;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
