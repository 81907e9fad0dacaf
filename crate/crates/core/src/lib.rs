//! Convolution-free semantic segmentation with windowed attention.
//!
//! The crate carries its own small tensor engine with tape-based reverse-mode
//! differentiation ([`autodiff`]), the window geometry of (shifted) window
//! attention ([`window`], [`attention`]), a hierarchical Swin-style backbone
//! ([`backbone`]), a transformer feature-pyramid encoder ([`encoder`]), three
//! multi-shifted-window decoders ([`decoder`]), and the training/evaluation
//! harness around them.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};
