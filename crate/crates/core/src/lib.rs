//! Desk-scale workbench for synthetic embryo imaging.

pub mod checkpoint;
pub mod classify;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fid;
pub mod gan;
pub mod nn;
pub mod raster;
pub mod turing;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/diffusion.md")]
    struct Diffusion;
    #[doc = include_str!("../../../book/src/adversarial.md")]
    struct Adversarial;
    #[doc = include_str!("../../../book/src/fid.md")]
    struct Fid;
    #[doc = include_str!("../../../book/src/classification.md")]
    struct Classification;
}
