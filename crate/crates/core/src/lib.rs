//! Wireless channel modelling with geometric algebra transformers.
//!
//! The crate covers projective geometric algebra primitives, a small
//! reverse-mode autodiff engine, scene tokenization, an equivariant
//! transformer and a plain transformer baseline, an image-method ray tracer
//! that produces training data, surrogate training, gradient-based receiver
//! localization and masked diffusion over scenes.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod ga;
pub mod io;
pub mod localization;
pub mod net;
pub mod raysim;
pub mod scene;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
