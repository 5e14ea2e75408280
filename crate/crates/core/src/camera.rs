//! Pinhole camera, world→camera transform, local-affine projection of
//! covariances, and frustum culling.
//!
//! Pixel `(row, col)` is sampled at continuous image coordinate `(col, row)`,
//! so a principal point of `((w-1)/2, (h-1)/2)` is the exact image centre.

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::GaussianSet;

pub const DEFAULT_NEAR: f64 = 0.01;

/// Support padding in standard deviations for culling.
pub const CULL_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World→camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            near: DEFAULT_NEAR,
        };
        cam.validate(1e-6)?;
        Ok(cam)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0) {
            return Err(Error::InvalidCamera("near plane must be positive".into()));
        }
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite())
            || ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidCamera("non-finite camera parameters".into()));
        }
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > tol {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (max deviation {err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant {det:.6} is not +1"
            )));
        }
        Ok(())
    }

    /// Looks from `eye` towards `target`; camera +z is the viewing direction,
    /// +y points down the image.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self::new(
            width,
            height,
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
        )
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// `q' = C q + t`, `Σ' = C Σ Cᵀ`.
pub fn world_to_camera(
    q: &Vector3<f64>,
    cov: &Matrix3<f64>,
    cam: &Camera,
) -> (Vector3<f64>, Matrix3<f64>) {
    let r = &cam.rotation;
    (r * q + cam.translation, r * cov * r.transpose())
}

fn check_depth(p: &Vector3<f64>, cam: &Camera) -> Result<()> {
    if p.z > cam.near {
        Ok(())
    } else {
        Err(Error::BehindCamera {
            z: p.z,
            near: cam.near,
        })
    }
}

/// Local-affine Jacobian of the pinhole projection at camera-space `p`.
/// The third row is `(0, 0, 1)`; only the top 2×2 block of `J Σ Jᵀ` is used.
pub fn perspective_jacobian(p: &Vector3<f64>, cam: &Camera) -> Result<Matrix3<f64>> {
    check_depth(p, cam)?;
    let (x, y, z) = (p.x, p.y, p.z);
    let z2 = z * z;
    Ok(Matrix3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / z2,
        0.0,
        cam.fy / z,
        -cam.fy * y / z2,
        0.0,
        0.0,
        1.0,
    ))
}

/// Top-left 2×2 block of `J Σ' Jᵀ`.
pub fn project_covariance(cov_cam: &Matrix3<f64>, jac: &Matrix3<f64>) -> Matrix2<f64> {
    let full = jac * cov_cam * jac.transpose();
    let m = full.fixed_view::<2, 2>(0, 0).into_owned();
    (m + m.transpose()) * 0.5
}

pub fn project_point(p: &Vector3<f64>, cam: &Camera) -> Result<[f64; 2]> {
    check_depth(p, cam)?;
    Ok([cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy])
}

/// Larger eigenvalue of a symmetric 2×2 matrix.
pub(crate) fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// Whether a projected splat's 3σ support touches the image rectangle.
pub(crate) fn in_padded_frame(mean: [f64; 2], cov2d: &Matrix2<f64>, cam: &Camera) -> bool {
    let pad = CULL_SIGMAS * max_eigenvalue(cov2d).max(0.0).sqrt();
    // pixel centres span [0, w-1] × [0, h-1]; the rectangle edges sit half a
    // pixel further out
    let (x0, x1) = (-0.5 - pad, cam.width as f64 - 0.5 + pad);
    let (y0, y1) = (-0.5 - pad, cam.height as f64 - 0.5 + pad);
    mean[0] >= x0 && mean[0] <= x1 && mean[1] >= y0 && mean[1] <= y1
}

/// Indices of Gaussians in front of the near plane whose projected mean lies
/// within the image rectangle padded by 3σ of the projected covariance.
pub fn frustum_cull(set: &GaussianSet, cam: &Camera) -> Vec<usize> {
    set.gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let q = Vector3::from(g.position.map(f64::from));
            let cov = g.covariance().ok()?;
            let (qc, cc) = world_to_camera(&q, &cov, cam);
            let jac = perspective_jacobian(&qc, cam).ok()?;
            let mean = project_point(&qc, cam).ok()?;
            let c2 = project_covariance(&cc, &jac);
            in_padded_frame(mean, &c2, cam).then_some(i)
        })
        .collect()
}
