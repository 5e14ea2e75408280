//! File formats: PLY point clouds, camera JSON, 8-bit PNG images, binary
//! checkpoints and TOML/JSON configuration.

pub(crate) mod binary;
pub mod cameras;
pub mod checkpoint;
pub mod config;
pub mod ply;
pub mod png;

pub use cameras::{load_cameras, CameraRecord, LoadedCamera};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::load_config;
pub use ply::load_ply;
pub use png::{load_image, save_image};
