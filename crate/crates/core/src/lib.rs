pub mod container;
pub mod diffnet;
pub mod error;
pub mod evalkit;
mod fft;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod registration;
pub mod simgen;
pub mod spectral;

pub use error::{Error, Result};
pub use image::{DefectMap, ImageBuf, Plane};
