//! Collaborative feature ensembling adaptation (CFEA) for unsupervised
//! optic disc and cup segmentation.
//!
//! A labeled source domain and an unlabeled target domain are trained
//! together: a shared-weight encoder–decoder learns segmentation from source
//! masks, two discriminators align encoder features and decoder predictions
//! across domains, and an exponential-moving-average teacher supplies
//! consistency targets on target images.

pub mod augment;
pub mod backbone;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod ema;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod persistence;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
