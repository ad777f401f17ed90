//! Spatially-varying BRDF capture from flash photographs.
//!
//! The crate bundles four pieces that are usually used together:
//!
//! - [`material`]: the per-pixel reflectance model and its map container.
//! - [`render`]: a point-light renderer with an analytic adjoint.
//! - [`tensor`]: dense tensors, a reverse-mode tape and Adam.
//! - [`generator`] and [`train`]: a small style-modulated generator that acts
//!   as a prior over material maps, and the adversarial trainer for it.
//!
//! [`invert`] fits maps to photographs either directly or through the
//! generator's latent spaces; [`io`] and [`eval`] cover files and metrics.

pub mod eval;
pub mod generator;
pub mod invert;
pub mod io;
pub mod material;
pub mod render;
pub mod tensor;
pub mod train;

pub use material::{SvbrdfMaps, R_MIN};
pub use render::{make_collocated_view, render, render_backward, CaptureView, Image};
pub use tensor::{Tensor, TensorError};

/// Files shipped with the crate: the trained 64x64 prior and the
/// low-roughness starting latents embedded with it.
pub mod assets {
    use std::path::PathBuf;

    pub fn dir() -> PathBuf {
        PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/assets"))
    }

    /// `generator.ntc`, with its configuration in `generator.toml`.
    pub fn prior() -> PathBuf {
        dir().join("generator.ntc")
    }

    pub fn low_rough_preset() -> PathBuf {
        dir().join("lowrough.ntc")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid maps: {0}")]
    InvalidMaps(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}
