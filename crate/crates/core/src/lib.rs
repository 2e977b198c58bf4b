//! Text-and-mask conditioned eyeglasses editing in a generator's W+ space.

pub mod backbones;
pub mod checkpoint;
pub mod color;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod inference;
pub mod latent;
pub mod losses;
pub mod mapper;
pub mod mask;
pub mod mask_encoder;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod optim;
pub mod params;
pub mod report;
pub mod segmentation;
pub mod training;

pub use error::{Error, Result};
