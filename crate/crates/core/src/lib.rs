//! Camouflaged adversarial patch generation.
//!
//! A patch is a per-pixel mixture over a small palette of base colors taken
//! from the surrounding environment. The mixture logits are optimized by
//! gradient descent against a differentiable detector, averaged over random
//! photometric and geometric transformations. Because the palette is fixed
//! during optimization, a trained pattern can later be recolored for a new
//! environment without any further optimization.
//!
//! Module map:
//!
//! - [`palette`]: k-means base color extraction.
//! - [`patch`]: mixture parameters, rendering and quantization.
//! - [`eot`]: transformation sampling and the differentiable transforms.
//! - [`scene`]: synthetic labeled scenes and patch compositing.
//! - [`detector`]: the trainable single-stage grid detector.
//! - [`attack`]: the optimization loop and the pattern/color decomposition.
//! - [`eval`]: IoU, AP50 and variant comparisons.
//! - [`io`]: artifact files, PNG codecs and dataset directories.

pub mod attack;
pub mod detector;
pub mod eot;
pub mod eval;
mod error;
pub mod image;
pub mod io;
pub mod optim;
pub mod palette;
pub mod patch;
pub mod scene;

pub use error::{Error, Result};

/// Version tag carried by every artifact file.
pub const FORMAT_VERSION: &str = "capgen.v1";
