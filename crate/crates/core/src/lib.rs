//! Weakly-supervised ROI extraction.
//!
//! Stage one trains a binary scene classifier on image-level labels and turns
//! multiscale Grad-CAM maps into binary pseudo labels. Stage two trains a UNet
//! on those pseudo labels with a cross-entropy term plus InfoNCE terms that pull
//! predicted-foreground decoder features away from background features.

pub mod cam;
pub mod classifier;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod extractor;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod resample;
pub mod seed;

pub use error::{Error, Result};
