//! Joint optimization of a neural radiance field and camera parameters from
//! photometric loss alone.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f64` or `f32`);
//! the aliases below fix the scalar for the common cases.

pub mod autodiff;
pub mod camera;
pub mod dataio;
pub mod encoding;
pub mod fields;
pub mod metrics;
pub mod raster;
pub mod renderer;
pub mod scalar;
pub mod synthscene;
pub mod training;

pub use scalar::Real;

pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Checkpoint64 = dataio::Checkpoint<f64>;
pub type Checkpoint32 = dataio::Checkpoint<f32>;
