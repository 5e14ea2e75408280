//! Camera rigs as a JSON array of
//! `{id, width, height, fx, fy, cx, cy, R, t, image}` records, with `R` the
//! row-major world→camera rotation and `t` the translation.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, DEFAULT_NEAR};
use crate::error::{Error, Result};

/// Orthonormality tolerance for rotations read from disk.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraId {
    Number(u64),
    Name(String),
}

impl std::fmt::Display for CameraId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CameraId::Number(n) => write!(f, "{n}"),
            CameraId::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: CameraId,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub image: String,
}

impl CameraRecord {
    pub fn from_camera(id: CameraId, cam: &Camera, image: impl Into<String>) -> Self {
        let r = cam.rotation;
        Self {
            id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            r: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            image: image.into(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_row_slice(&self.r),
            translation: Vector3::from(self.t),
            near: DEFAULT_NEAR,
        };
        cam.validate(ROTATION_TOLERANCE)
            .map_err(|e| Error::InvalidCamera(format!("camera {}: {e}", self.id)))?;
        Ok(cam)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCamera {
    pub id: CameraId,
    pub camera: Camera,
    /// Ground-truth image path, resolved against the JSON file's directory.
    pub image: PathBuf,
}

pub fn parse_cameras(json: &str, base_dir: &Path) -> Result<Vec<LoadedCamera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(json)?;
    records
        .into_iter()
        .map(|r| {
            Ok(LoadedCamera {
                camera: r.to_camera()?,
                image: base_dir.join(&r.image),
                id: r.id,
            })
        })
        .collect()
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<LoadedCamera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text, path.parent().unwrap_or(Path::new("")))
}

pub fn save_cameras(path: impl AsRef<Path>, records: &[CameraRecord]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
