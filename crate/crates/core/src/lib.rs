//! Yield estimation from ground-robot fisheye video of soybean plots.
//!
//! Stages, in pipeline order:
//!
//! 1. [`camera`]: equidistant fisheye model, undistortion to a pinhole view, centre crop.
//! 2. [`ingest`]: frame manifests, timestamp-window plot assignment, yield normalisation.
//! 3. [`sampler`]: twenty representative frames per plot.
//! 4. [`augment`]: random sensor effects for training data.
//! 5. [`counting`]: seed counts, the reference blob counter, count metrics.
//! 6. [`tensornet`] and [`yieldnet`]: the plot-level yield regression network.
//! 7. [`spatial`]: moving-grid adjustment of plot phenotypes.
//! 8. [`ranking`]: top-fraction selection and confusion scores.
//!
//! [`synthfield`] generates synthetic fields with known ground truth for
//! end-to-end checks.

// `!(x > 0.0)` also rejects NaN, which is the intent throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod camera;
pub mod counting;
pub mod error;
pub mod image;
pub mod ingest;
pub mod ranking;
pub mod sampler;
pub mod spatial;
pub mod synthfield;
pub mod tensornet;
pub mod yieldnet;

pub use error::{Error, Result};
pub use image::Image;
