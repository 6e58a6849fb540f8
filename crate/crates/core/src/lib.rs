//! Diverse 360-degree panorama outpainting.
//!
//! A narrow field-of-view fragment of an equirectangular panorama is
//! encoded into discrete tokens, completed by an autoregressive scene
//! model (optionally with circular inference so both panorama ends agree),
//! decoded, upscaled and finally reconciled with the input by an
//! adjustment network.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod erp;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod params;
pub mod tensor;
pub mod transformer;
pub mod vq;

pub use error::{Error, Result};
