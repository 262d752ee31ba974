//! Land-use / land-cover tile classification toolkit.
//!
//! The crate covers the whole path from georeferenced raster scenes to a
//! stitched, smoothed class map:
//!
//! * [`geo`]: catalog filtering, ROI masking, tiling and channel standardization
//! * [`dataset`]: stratified splits, augmentation and deterministic batching
//! * [`nn`]: tensors, convolution / batch-norm / residual layers, loss and SGD
//! * [`train`]: epoch loop with validation, early stopping and timing
//! * [`infer`]: batched prediction, confidence suppression, majority filter, stitching
//! * [`metrics`]: confusion matrices, the warm-up timing protocol and speed-up reports
//! * [`map`]: GeoJSON and self-contained HTML map output
//! * [`config`] and [`pipeline`]: the declarative pipeline driven by the `lulc` CLI
//!
//! Data-parallel inner loops (per-sample convolution, per-row masking and
//! filtering, per-tile prediction) run on rayon when the `parallel` feature is
//! enabled (the default) and fall back to plain iterators otherwise. Results
//! are identical either way.

pub mod clock;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geo;
pub mod infer;
pub mod map;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod train;

pub use error::{Error, Result};

/// Number of land-cover classes handled by the classifier.
pub const NUM_CLASSES: usize = 10;

/// Canonical class names, indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
];
