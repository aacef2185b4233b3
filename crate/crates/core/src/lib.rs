//! Cross-corpus domain adaptation for EEG emotion recognition.
//!
//! Implements a family of pairwise-learning transfer methods over prototype
//! representations: a domain-adversarial baseline (DannPL), kernel subdomain
//! alignment variants (LmmdPL, CddPL), and a three-stage dual-classifier
//! scheme (McdPL), together with differential-entropy feature extraction,
//! synthetic cross-corpus data generation, and evaluation protocols.
//!
//! Everything runs on a small reverse-mode autodiff engine over dense `f64`
//! matrices ([`autodiff`]); training is deterministic given a root seed.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rng;
pub mod training;

pub use autodiff::{optim, tape};
pub use error::{Error, Result};
