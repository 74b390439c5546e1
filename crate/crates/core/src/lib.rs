pub mod binio;
pub mod cli;
pub mod diffeng;
pub mod editor;
mod error;
pub mod gaussians;
pub mod hexplane;
pub mod image;
pub mod renderer;
pub mod scene_io;
pub mod sds;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
