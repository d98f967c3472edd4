pub mod augment;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod mask;
pub mod models;
pub mod nn;
pub mod raster;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;

#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    pub mod dataset {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    pub mod augmentation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    pub mod architectures {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/deployment.md")]
    pub mod deployment {}
}
