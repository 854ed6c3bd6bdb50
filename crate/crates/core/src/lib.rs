pub mod archive;
pub mod autograd;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod feature_viz;
pub mod layers;
pub mod lora;
pub mod model;
pub mod params;
pub mod resample;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
