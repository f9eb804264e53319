//! Wind-turbine blade-icing diagnosis with parallel GAN feature extractors.
//!
//! Two frameworks share one front end: two GANs, each trained on a single
//! class, whose discriminator/generator feature residuals are stacked and fed
//! to a convolutional head. `PgancModel` classifies directly; `PgantModel`
//! adds a maximum-mean-discrepancy critic for training on a labeled source
//! turbine and an unlabeled target turbine.

pub mod checkpoint;
pub mod data;
pub mod diffnet;
pub mod eval;
pub mod models;
pub mod synth;
pub mod training;

mod error;

pub use error::{Error, Result};
