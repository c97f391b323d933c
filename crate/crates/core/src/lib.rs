//! Open-set domain generalization with feature-space semantic invariance.
//!
//! The crate trains a small feature extractor `g` and classifier `h` on
//! multi-domain colored digits, regularizing `g` to be invariant under
//! generator-driven domain transfer and bounding the energy of in-distribution
//! samples against synthetic outliers made by blending semantic codes. The
//! trained network is then scored with post-hoc OOD detectors on an unseen
//! domain that also contains unseen classes.
//!
//! Layout:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, SGD, seeded RNG streams, gradient checking.
//! - [`network`]: the `g ∘ h` multilayer perceptron.
//! - [`datasets`]: IDX ingestion, procedural glyphs, colorization, splits, raw dumps.
//! - [`generator`]: the semantic/variation disentangler (exact oracle and learned autoencoder).
//! - [`objective`]: cross-entropy plus the feature-invariance and energy-bounding regularizers.
//! - [`detectors`]: energy, max-softmax, and class-conditional Gaussian density scorers.
//! - [`eval`]: AUROC, AUPR, ID accuracy, trial aggregation.
//! - [`runner`]: configuration, training loop, checkpoints, random search, reports.

pub mod datasets;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod generator;
pub mod network;
pub mod numerics;
pub mod objective;
pub mod runner;

pub use error::{Error, Result};
