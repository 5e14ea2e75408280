//! Depth-sorted alpha-blended splat rendering and its analytic backward pass.
//!
//! Rendering is a brute-force loop over every visible splat for every pixel.
//! Rows are processed in parallel; the backward pass accumulates gradients
//! into per-row buffers that are summed in row order, so results do not
//! depend on the number of threads.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::scene::{covariance_unchecked, quat_to_matrix, sigmoid, GaussianSet};
use crate::sh;

/// Upper bound on a splat's opacity during blending; keeps transmittance
/// strictly positive.
pub const MAX_ALPHA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    /// Isotropic dilation `h` added to every 2D covariance (pixels²).
    pub dilation: f64,
    pub transmittance_floor: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            transmittance_floor: 1e-4,
            background: [0.0; 3],
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dilation >= 0.0 && self.dilation.is_finite()) {
            return Err(Error::invalid("dilation must be non-negative"));
        }
        if !(self.transmittance_floor > 0.0 && self.transmittance_floor < 1.0) {
            return Err(Error::invalid("transmittance floor must lie in (0, 1)"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background colour outside [0, 1]"));
        }
        Ok(())
    }
}

/// A Gaussian projected into a view.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub source_index: usize,
}

/// Partial derivatives of a scalar loss with respect to one Gaussian's
/// parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl GaussianGrad {
    fn zeros(sh_len: usize) -> Self {
        Self {
            sh: vec![[0.0; 3]; sh_len],
            ..Default::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.log_scale)
            .chain(&self.rotation)
            .chain(std::iter::once(&self.opacity_logit))
            .chain(self.sh.iter().flatten())
            .all(|v| v.is_finite())
    }

    fn add_assign(&mut self, o: &GaussianGrad) {
        add3(&mut self.position, &o.position);
        add3(&mut self.log_scale, &o.log_scale);
        for i in 0..4 {
            self.rotation[i] += o.rotation[i];
        }
        self.opacity_logit += o.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            add3(a, b);
        }
    }

    fn scale(&mut self, k: f64) {
        self.position.iter_mut().for_each(|v| *v *= k);
        self.log_scale.iter_mut().for_each(|v| *v *= k);
        self.rotation.iter_mut().for_each(|v| *v *= k);
        self.opacity_logit *= k;
        self.sh.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

#[inline]
fn add3(a: &mut [f64; 3], b: &[f64; 3]) {
    a[0] += b[0];
    a[1] += b[1];
    a[2] += b[2];
}

/// Gradient of a scalar loss with respect to every parameter of a
/// [`GaussianSet`]; `grads[i]` is congruent with `set.gaussians[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<GaussianGrad>,
}

impl GradientSet {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        Self {
            grads: set
                .gaussians
                .iter()
                .map(|g| GaussianGrad::zeros(g.sh.coeffs().len()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(GaussianGrad::is_finite)
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(k));
    }
}

/// Inverse of the dilated covariance `cov2d + h·I`.
fn dilated_conic(cov2d: &Matrix2<f64>, h: f64) -> Result<Matrix2<f64>> {
    let a = cov2d + Matrix2::identity() * h;
    let det = a.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::SingularCovariance { det });
    }
    let inv = Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det;
    Ok((inv + inv.transpose()) * 0.5)
}

#[inline]
fn weight_with_conic(x: [f64; 2], mean: [f64; 2], conic: &Matrix2<f64>) -> f64 {
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    let power = -0.5 * (conic[(0, 0)] * dx * dx + 2.0 * conic[(0, 1)] * dx * dy + conic[(1, 1)] * dy * dy);
    power.exp()
}

/// `exp(-½ (x-μ)ᵀ (Σ + hI)⁻¹ (x-μ))`.
pub fn gaussian_weight_2d(x: [f64; 2], mean: [f64; 2], cov2d: &Matrix2<f64>, h: f64) -> Result<f64> {
    let conic = dilated_conic(cov2d, h)?;
    Ok(weight_with_conic(x, mean, &conic))
}

/// Stable ascending order by depth.
pub fn sort_by_depth(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth));
    order
}

/// Blending weights `α_n G_n Π_{j<n}(1 - α_j G_j)` of depth-sorted splats at
/// `x`, and the transmittance left for the background. Splats after the
/// early-termination point get weight 0.
pub fn blend_weights(sorted: &[Splat2D], x: [f64; 2], cfg: &RasterConfig) -> Result<(Vec<f64>, f64)> {
    let mut weights = vec![0.0; sorted.len()];
    let mut t = 1.0;
    for (w, s) in weights.iter_mut().zip(sorted) {
        let a = s.alpha * gaussian_weight_2d(x, s.mean2d, &s.cov2d, cfg.dilation)?;
        *w = a * t;
        t *= 1.0 - a;
        if t < cfg.transmittance_floor {
            break;
        }
    }
    Ok((weights, t))
}

/// Front-to-back compositing of depth-sorted splats at `x`, with the
/// remaining transmittance applied to the background.
pub fn alpha_blend_pixel(sorted: &[Splat2D], x: [f64; 2], cfg: &RasterConfig) -> Result<[f64; 3]> {
    let (weights, t) = blend_weights(sorted, x, cfg)?;
    let mut c = cfg.background.map(|b| b * t);
    for (w, s) in weights.iter().zip(sorted) {
        for ch in 0..3 {
            c[ch] += w * s.color[ch];
        }
    }
    Ok(c)
}

/// Everything about one visible Gaussian that the forward and backward
/// passes need.
struct Projected {
    source: usize,
    mean: [f64; 2],
    conic: Matrix2<f64>,
    depth: f64,
    color: [f64; 3],
    /// Channels whose raw SH colour fell outside [0, 1] and was clamped.
    clamped: [bool; 3],
    /// `sigmoid(opacity_logit)` before the blending clamp.
    opacity: f64,
    alpha: f64,
}

fn view_direction(q: &Vector3<f64>, cam: &Camera) -> (Vector3<f64>, f64) {
    let v = q - cam.center();
    let n = v.norm();
    if n > 0.0 {
        (v / n, n)
    } else {
        (Vector3::new(0.0, 0.0, 1.0), 0.0)
    }
}

fn normalized_quat(q: [f32; 4]) -> ([f64; 4], f64) {
    let q = q.map(f64::from);
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 {
        (q.map(|v| v / n), n)
    } else {
        ([1.0, 0.0, 0.0, 0.0], 1.0)
    }
}

/// Culls, projects and depth-sorts the scene for one view. Gaussians that
/// fail to project are dropped.
fn project_scene(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Vec<Projected> {
    let mut out: Vec<Projected> = set
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let q = Vector3::from(g.position.map(f64::from));
            let (rot, _) = normalized_quat(g.rotation);
            let cov = covariance_unchecked(g.log_scale.map(f64::from), rot);
            if !cov.iter().all(|v| v.is_finite()) || !q.iter().all(|v| v.is_finite()) {
                return None;
            }
            let (qc, cc) = camera::world_to_camera(&q, &cov, cam);
            let jac = camera::perspective_jacobian(&qc, cam).ok()?;
            let mean = camera::project_point(&qc, cam).ok()?;
            let cov2d = camera::project_covariance(&cc, &jac);
            if !camera::in_padded_frame(mean, &cov2d, cam) {
                return None;
            }
            let conic = dilated_conic(&cov2d, cfg.dilation).ok()?;
            let (dir, _) = view_direction(&q, cam);
            let basis = sh::sh_basis([dir.x, dir.y, dir.z], g.sh.degree());
            let raw = sh::sh_color_raw(g.sh.coeffs(), &basis);
            let opacity = sigmoid(g.opacity_logit as f64);
            Some(Projected {
                source: i,
                mean,
                conic,
                depth: qc.z,
                color: raw.map(|c| c.clamp(0.0, 1.0)),
                clamped: raw.map(|c| !(0.0..=1.0).contains(&c)),
                opacity,
                alpha: opacity.min(MAX_ALPHA),
            })
        })
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    out
}

/// Projected splats for a view in blending order.
pub fn project_splats(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Vec<Splat2D> {
    project_scene(set, cam, cfg)
        .into_iter()
        .map(|p| {
            let g = &set.gaussians[p.source];
            let q = Vector3::from(g.position.map(f64::from));
            let (rot, _) = normalized_quat(g.rotation);
            let cov = covariance_unchecked(g.log_scale.map(f64::from), rot);
            let (qc, cc) = camera::world_to_camera(&q, &cov, cam);
            let jac = camera::perspective_jacobian(&qc, cam).expect("visible splat");
            Splat2D {
                mean2d: p.mean,
                cov2d: camera::project_covariance(&cc, &jac),
                depth: p.depth,
                color: p.color,
                alpha: p.alpha,
                source_index: p.source,
            }
        })
        .collect()
}

#[inline]
fn pixel_coord(row: usize, col: usize) -> [f64; 2] {
    [col as f64, row as f64]
}

fn shade_pixel(splats: &[Projected], x: [f64; 2], cfg: &RasterConfig) -> [f64; 3] {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        let a = s.alpha * weight_with_conic(x, s.mean, &s.conic);
        let w = a * t;
        for ch in 0..3 {
            c[ch] += w * s.color[ch];
        }
        t *= 1.0 - a;
        if t < cfg.transmittance_floor {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += t * cfg.background[ch];
    }
    c
}

/// Renders a 3-channel image of `set` seen from `cam`.
pub fn render(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Result<ImageF> {
    cfg.validate()?;
    let (h, w) = (cam.height, cam.width);
    let mut img = ImageF::new(h, w, 3)?;
    let splats = project_scene(set, cam, cfg);
    img.data_mut()
        .par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(row, out)| {
            for col in 0..w {
                let c = shade_pixel(&splats, pixel_coord(row, col), cfg);
                out[col * 3..col * 3 + 3].copy_from_slice(&c);
            }
        });
    Ok(img)
}

/// Screen-space gradient of one splat, accumulated over pixels.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    color: [f64; 3],
    opacity: f64,
    mean: [f64; 2],
    /// With respect to conic entries (a, b, c) of `[[a, b], [b, c]]`.
    conic: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        add3(&mut self.color, &o.color);
        self.opacity += o.opacity;
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        add3(&mut self.conic, &o.conic);
    }
}

struct PixelState {
    alpha: f64,
    transmittance: f64,
    weight: f64,
    clamped: bool,
}

fn backward_pixel(
    splats: &[Projected],
    x: [f64; 2],
    d_pixel: [f64; 3],
    cfg: &RasterConfig,
    states: &mut Vec<PixelState>,
    acc: &mut [SplatGrad],
) {
    if d_pixel == [0.0; 3] {
        return;
    }
    states.clear();
    let mut t = 1.0;
    for s in splats {
        let g = weight_with_conic(x, s.mean, &s.conic);
        let raw = s.alpha * g;
        states.push(PixelState {
            alpha: raw,
            transmittance: t,
            weight: g,
            clamped: s.opacity > MAX_ALPHA,
        });
        t *= 1.0 - raw;
        if t < cfg.transmittance_floor {
            break;
        }
    }
    // colour accumulated behind the current splat, background included
    let mut behind = cfg.background.map(|b| b * t);
    for (i, st) in states.iter().enumerate().rev() {
        let s = &splats[i];
        let gacc = &mut acc[i];
        let mut d_alpha = 0.0;
        for ch in 0..3 {
            gacc.color[ch] += st.alpha * st.transmittance * d_pixel[ch];
            d_alpha += d_pixel[ch] * (st.transmittance * s.color[ch] - behind[ch] / (1.0 - st.alpha));
            behind[ch] += s.color[ch] * st.alpha * st.transmittance;
        }
        if !st.clamped {
            gacc.opacity += d_alpha * st.weight;
        }
        let d_g = d_alpha * s.alpha;
        let dx = x[0] - s.mean[0];
        let dy = x[1] - s.mean[1];
        let (a, b, c) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
        let gw = d_g * st.weight;
        gacc.mean[0] += gw * (a * dx + b * dy);
        gacc.mean[1] += gw * (b * dx + c * dy);
        gacc.conic[0] += -0.5 * gw * dx * dx;
        gacc.conic[1] += -gw * dx * dy;
        gacc.conic[2] += -0.5 * gw * dy * dy;
    }
}

/// Derivatives of the rotation matrix entries with respect to `(w, x, y, z)`.
fn rotation_matrix_vjp(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Chains a splat's screen-space gradient back to its Gaussian's parameters.
fn backward_gaussian(
    set: &GaussianSet,
    cam: &Camera,
    p: &Projected,
    sg: &SplatGrad,
) -> GaussianGrad {
    let g = &set.gaussians[p.source];
    let mut out = GaussianGrad::zeros(g.sh.coeffs().len());

    // opacity activation
    out.opacity_logit = sg.opacity * p.opacity * (1.0 - p.opacity);

    // colour → SH coefficients and view direction
    let q = Vector3::from(g.position.map(f64::from));
    let (dir, dist) = view_direction(&q, cam);
    let d_color: [f64; 3] = std::array::from_fn(|ch| if p.clamped[ch] { 0.0 } else { sg.color[ch] });
    let (basis, dbasis) = sh::sh_basis_with_grad([dir.x, dir.y, dir.z], g.sh.degree());
    let mut d_dir = Vector3::zeros();
    for (k, coef) in g.sh.coeffs().iter().enumerate() {
        let mut s = 0.0;
        for ch in 0..3 {
            out.sh[k][ch] = d_color[ch] * basis[k];
            s += d_color[ch] * coef[ch] as f64;
        }
        d_dir += Vector3::from(dbasis[k]) * s;
    }
    let mut d_q = Vector3::zeros();
    if dist > 0.0 {
        d_q += (d_dir - dir * dir.dot(&d_dir)) / dist;
    }

    // conic → dilated covariance → 2D covariance (full symmetric gradients)
    let gq = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let d_cov2d = -(p.conic * gq * p.conic);

    let (rot_q, qnorm) = normalized_quat(g.rotation);
    let u = quat_to_matrix(rot_q);
    let s = Vector3::from(g.log_scale.map(|v| (v as f64).exp()));
    let m = u * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();

    let w = &cam.rotation;
    let t = w * q + cam.translation;
    let (x, y, z) = (t.x, t.y, t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let j2 = nalgebra::Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let t2 = j2 * w;

    let d_sigma = t2.transpose() * d_cov2d * t2;
    let d_t2 = 2.0 * d_cov2d * t2 * sigma;
    let d_j2 = d_t2 * w.transpose();

    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_t = Vector3::new(
        d_j2[(0, 2)] * (-fx / z2),
        d_j2[(1, 2)] * (-fy / z2),
        d_j2[(0, 0)] * (-fx / z2)
            + d_j2[(0, 2)] * (2.0 * fx * x / z3)
            + d_j2[(1, 1)] * (-fy / z2)
            + d_j2[(1, 2)] * (2.0 * fy * y / z3),
    );
    // projected mean
    d_t.x += sg.mean[0] * fx / z;
    d_t.y += sg.mean[1] * fy / z;
    d_t.z += -sg.mean[0] * fx * x / z2 - sg.mean[1] * fy * y / z2;
    d_q += w.transpose() * d_t;
    out.position = [d_q.x, d_q.y, d_q.z];

    // Σ = M Mᵀ, M = U diag(s)
    let d_m = 2.0 * d_sigma * m;
    let mut d_u = Matrix3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += d_m[(i, k)] * u[(i, k)];
            d_u[(i, k)] = d_m[(i, k)] * s[k];
        }
        out.log_scale[k] = ds * s[k];
    }
    let d_qhat = rotation_matrix_vjp(rot_q, &d_u);
    let dot: f64 = (0..4).map(|i| d_qhat[i] * rot_q[i]).sum();
    for i in 0..4 {
        out.rotation[i] = (d_qhat[i] - rot_q[i] * dot) / qnorm;
    }
    out
}

/// Gradient of a scalar loss with respect to every Gaussian parameter, given
/// the loss gradient with respect to the rendered image.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    cfg: &RasterConfig,
    d_image: &ImageF,
) -> Result<GradientSet> {
    cfg.validate()?;
    let (h, w) = (cam.height, cam.width);
    if d_image.height() != h || d_image.width() != w || d_image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "image gradient {}x{}x{} for a {h}x{w}x3 render",
            d_image.height(),
            d_image.width(),
            d_image.channels()
        )));
    }
    let splats = project_scene(set, cam, cfg);
    let n = splats.len();
    let rows: Vec<Vec<SplatGrad>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut acc = vec![SplatGrad::default(); n];
            let mut states = Vec::with_capacity(n);
            for col in 0..w {
                let i = d_image.index(row, col, 0);
                let d = [d_image.data()[i], d_image.data()[i + 1], d_image.data()[i + 2]];
                backward_pixel(&splats, pixel_coord(row, col), d, cfg, &mut states, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![SplatGrad::default(); n];
    for row in &rows {
        for (t, r) in total.iter_mut().zip(row) {
            t.add(r);
        }
    }
    let mut grads = GradientSet::zeros_like(set);
    for (p, sg) in splats.iter().zip(&total) {
        grads.grads[p.source] = backward_gaussian(set, cam, p, sg);
    }
    Ok(grads)
}
