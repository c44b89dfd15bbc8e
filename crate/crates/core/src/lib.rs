// Validation compares with `!(x >= 0.0)` and similar so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod color;
pub mod config;
pub mod crawl;
pub mod crf;
pub mod cues;
pub mod error;
pub mod eval;
pub mod labels;
pub mod maps;
pub mod nfm;
pub mod overlay;
pub mod pipeline;
pub mod qfilter;
pub mod raster;
pub mod refine;
pub mod regions;
pub mod surrogate;
pub mod synth;

pub use error::{Error, Result};
