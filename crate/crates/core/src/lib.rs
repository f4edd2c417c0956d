//! Adversarial lightness attack.
//!
//! A classifier is attacked by re-rendering an image through a piecewise
//! linear curve on the CIELAB lightness channel and optimizing the curve's
//! slopes against the model's margin loss. The crate bundles everything
//! needed to reproduce that pipeline at desk scale: color conversion, the
//! filter and its Jacobian, small differentiable classifiers, a seeded
//! synthetic corpus, the attack loop, and evaluation utilities.

pub mod attack;
pub mod colorspace;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod filter;
pub mod image_io;
pub mod model;

pub use attack::{run_attack, run_batch, AttackConfig, AttackReport, BatchResult, Variant};
pub use colorspace::{lab_to_rgb, rgb_to_lab, LabImage, RgbImage};
pub use dataset::{generate_corpus, CorpusSpec, LabeledImage};
pub use error::{Error, Result};
pub use filter::{apply_filter, filter_jacobian, FilterParams, LightnessRange};
pub use model::{Architecture, Model};
