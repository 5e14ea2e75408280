//! CPU differentiable 3D Gaussian splatting.
//!
//! The crate covers the whole pipeline at desk scale: point-cloud
//! initialisation with distance- and opacity-driven spherical-harmonic
//! coefficients, a depth-sorted alpha-blending rasterizer with an analytic
//! backward pass, L1 / D-SSIM / stochastic patch-SSIM / total-variation
//! losses, an Adam training loop with opacity pruning, and an inference-only
//! multi-scale residual super-resolution network for upscaling renders.

pub mod camera;
pub mod cli;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod msrn;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod trainer;

pub use camera::Camera;
pub use error::{Error, Result};
pub use image::ImageF;
pub use losses::{LossConfig, Phase};
pub use msrn::MsrnModel;
pub use raster::{GradientSet, RasterConfig};
pub use scene::{Gaussian3D, GaussianSet, PointCloud, ShBank, ShInitConfig, ShInitMode};
pub use trainer::{TrainConfig, TrainLog, View};
