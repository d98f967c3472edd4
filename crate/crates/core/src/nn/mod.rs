//! Neural-network building blocks on top of candle tensors.

pub mod archive;
pub mod fused;
pub mod kernels;
pub mod layers;
pub mod ops;
pub mod params;

pub use kernels::ConvGeom;
pub use params::{Builder, Init, Param, ParamKind, ParamStore};
