//! Test-only helpers: random scenes and a finite-difference gradient oracle
//! that works directly on the stored `f32` parameters.

#![allow(dead_code)]

use nalgebra::Vector3;
use patchsplat::raster::GradientSet;
use patchsplat::scene::{logit, Gaussian3D, GaussianSet, ShBank};
use patchsplat::sh::{coeff_count, SH_C0};
use patchsplat::{Camera, ImageF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn front_camera(size: usize) -> Camera {
    Camera::look_at(
        size,
        size,
        size as f64,
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
    )
    .unwrap()
}

pub fn random_unit_quat(rng: &mut impl Rng) -> [f32; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            return q.map(|v| (v / n) as f32);
        }
    }
}

/// Minimum depth gap between any two Gaussians of a random scene. The depth
/// sort is discontinuous at ties, so finite differences need the order to
/// stay fixed over the probe step.
pub const MIN_DEPTH_GAP: f32 = 0.05;

/// Up to `max_n` Gaussians clustered around the origin, with opacities and
/// colours kept away from the clamps so the loss is smooth in every
/// parameter. Depths (world z for `front_camera`) are well separated.
pub fn random_scene(seed: u64, max_n: usize) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_n);
    let max_degree = 3;
    let mut depths: Vec<f32> = Vec::with_capacity(n);
    while depths.len() < n {
        let z = rng.gen_range(-0.6f32..0.6);
        if depths.iter().all(|d| (d - z).abs() >= MIN_DEPTH_GAP) {
            depths.push(z);
        }
    }
    let gaussians = depths
        .into_iter()
        .map(|z| {
            let degree = rng.gen_range(0..=max_degree);
            let mut coeffs = vec![[0.0f32; 3]; coeff_count(degree)];
            coeffs[0] = std::array::from_fn(|_| (rng.gen_range(-0.25..0.25) / SH_C0) as f32);
            for c in coeffs.iter_mut().skip(1) {
                *c = std::array::from_fn(|_| rng.gen_range(-0.08f32..0.08));
            }
            Gaussian3D {
                position: [rng.gen_range(-0.6f32..0.6), rng.gen_range(-0.6f32..0.6), z],
                log_scale: std::array::from_fn(|_| rng.gen_range(0.15f64..0.45).ln() as f32),
                rotation: random_unit_quat(&mut rng),
                opacity_logit: logit(rng.gen_range(0.2..0.6)) as f32,
                sh: ShBank::from_coeffs(degree, coeffs).unwrap(),
            }
        })
        .collect();
    GaussianSet::new(gaussians, max_degree).unwrap()
}

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageF::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Identifies one scalar parameter of a Gaussian.
#[derive(Debug, Clone, Copy)]
pub enum Param {
    Position(usize),
    LogScale(usize),
    Rotation(usize),
    Opacity,
    Sh(usize, usize),
}

pub fn params_of(g: &Gaussian3D) -> Vec<Param> {
    let mut out: Vec<Param> = (0..3).map(Param::Position).collect();
    out.extend((0..3).map(Param::LogScale));
    out.extend((0..4).map(Param::Rotation));
    out.push(Param::Opacity);
    for k in 0..g.sh.coeffs().len() {
        for ch in 0..3 {
            out.push(Param::Sh(k, ch));
        }
    }
    out
}

fn slot(g: &mut Gaussian3D, p: Param) -> &mut f32 {
    match p {
        Param::Position(i) => &mut g.position[i],
        Param::LogScale(i) => &mut g.log_scale[i],
        Param::Rotation(i) => &mut g.rotation[i],
        Param::Opacity => &mut g.opacity_logit,
        Param::Sh(k, ch) => &mut g.sh.coeffs_mut()[k][ch],
    }
}

pub fn analytic(grads: &GradientSet, i: usize, p: Param) -> f64 {
    let g = &grads.grads[i];
    match p {
        Param::Position(a) => g.position[a],
        Param::LogScale(a) => g.log_scale[a],
        Param::Rotation(a) => g.rotation[a],
        Param::Opacity => g.opacity_logit,
        Param::Sh(k, ch) => g.sh[k][ch],
    }
}

/// Copy of `set` with one parameter moved to `value` (rounded to `f32`);
/// also returns the stored value.
pub fn with_param(set: &GaussianSet, i: usize, p: Param, value: f64) -> (GaussianSet, f64) {
    let mut out = set.clone();
    let s = slot(&mut out.gaussians[i], p);
    *s = value as f32;
    let stored = *s as f64;
    (out, stored)
}

pub fn param_value(set: &GaussianSet, i: usize, p: Param) -> f64 {
    let mut g = set.gaussians[i].clone();
    *slot(&mut g, p) as f64
}

/// Number of L1 residuals and TV neighbour differences whose sign differs
/// between the two images. Each one is a kink of the loss inside the stencil.
pub fn kink_crossings(a: &ImageF, b: &ImageF, target: &ImageF) -> usize {
    let sign_flip = |u: f64, v: f64| (u > 0.0) != (v > 0.0) || (u == 0.0) != (v == 0.0);
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut n = a
        .data()
        .iter()
        .zip(b.data())
        .zip(target.data())
        .filter(|((x, y), g)| sign_flip(*x - *g, *y - *g))
        .count();
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                if col + 1 < w && sign_flip(a.get(r, col + 1, ch) - a.get(r, col, ch), b.get(r, col + 1, ch) - b.get(r, col, ch)) {
                    n += 1;
                }
                if r + 1 < h && sign_flip(a.get(r + 1, col, ch) - a.get(r, col, ch), b.get(r + 1, col, ch) - b.get(r, col, ch)) {
                    n += 1;
                }
            }
        }
    }
    n
}

/// True when no probe stencil of any parameter straddles an L1 or TV kink,
/// i.e. the loss is differentiable over every interval the oracle samples.
pub fn stencils_are_smooth(
    set: &GaussianSet,
    render: &dyn Fn(&GaussianSet) -> ImageF,
    target: &ImageF,
    rel_step: f64,
) -> bool {
    set.gaussians.iter().enumerate().all(|(i, g)| {
        params_of(g).into_iter().all(|p| {
            let x = param_value(set, i, p);
            let h = rel_step * x.abs().max(1.0);
            let (plus, _) = with_param(set, i, p, x + h);
            let (minus, _) = with_param(set, i, p, x - h);
            kink_crossings(&render(&plus), &render(&minus), target) == 0
        })
    })
}

/// Central difference with relative step `rel_step` (absolute when the
/// parameter is below 1 in magnitude). The divisor is the actual distance
/// between the two `f32` evaluation points.
pub fn central_difference(
    set: &GaussianSet,
    i: usize,
    p: Param,
    rel_step: f64,
    loss: &dyn Fn(&GaussianSet) -> f64,
) -> f64 {
    let x = param_value(set, i, p);
    let h = rel_step * x.abs().max(1.0);
    let (plus, xp) = with_param(set, i, p, x + h);
    let (minus, xm) = with_param(set, i, p, x - h);
    (loss(&plus) - loss(&minus)) / (xp - xm)
}

#[derive(Debug)]
pub struct Mismatch {
    pub gaussian: usize,
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares every parameter; returns the entries outside
/// `|a - n| ≤ max(rel_tol·max(|a|, |n|), abs_floor)` and the number checked.
pub fn gradient_check(
    set: &GaussianSet,
    grads: &GradientSet,
    loss: &dyn Fn(&GaussianSet) -> f64,
    rel_step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> (Vec<Mismatch>, usize) {
    let mut bad = Vec::new();
    let mut checked = 0;
    for (i, g) in set.gaussians.iter().enumerate() {
        for p in params_of(g) {
            let a = analytic(grads, i, p);
            let n = central_difference(set, i, p, rel_step, loss);
            checked += 1;
            let tol = (rel_tol * a.abs().max(n.abs())).max(abs_floor);
            if (a - n).abs() > tol {
                bad.push(Mismatch { gaussian: i, param: p, analytic: a, numeric: n });
            }
        }
    }
    (bad, checked)
}

/// A target that differs from `img` by at least `margin` in every channel,
/// so no L1 residual sits near its kink.
pub fn offset_target(img: &ImageF, margin: f64, seed: u64) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let d = rng.gen_range(margin..0.3);
            let up = if rng.gen::<bool>() { v + d } else { v - d };
            if (0.0..=1.0).contains(&up) {
                up
            } else if up > 1.0 {
                v - d
            } else {
                v + d
            }
        })
        .collect();
    ImageF::from_vec(img.height(), img.width(), img.channels(), data).unwrap()
}

/// Five well-separated, fairly opaque Gaussians with distinct colours.
pub fn refit_ground_truth() -> GaussianSet {
    let specs: [([f32; 3], [f64; 3], f32); 5] = [
        ([0.0, 0.0, 0.0], [0.9, 0.2, 0.2], 0.30),
        ([0.55, 0.1, 0.2], [0.2, 0.8, 0.3], 0.22),
        ([-0.5, 0.3, -0.1], [0.2, 0.3, 0.9], 0.25),
        ([0.1, -0.5, 0.35], [0.9, 0.8, 0.2], 0.20),
        ([-0.2, 0.45, 0.5], [0.7, 0.3, 0.8], 0.18),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let gaussians = specs
        .iter()
        .map(|&(position, rgb, scale)| {
            let mut sh = ShBank::zeros(1);
            sh.coeffs_mut()[0] = rgb.map(|c| ((c - 0.5) / SH_C0) as f32);
            for k in 1..4 {
                sh.coeffs_mut()[k] = std::array::from_fn(|_| rng.gen_range(-0.1f32..0.1));
            }
            Gaussian3D {
                position,
                log_scale: [scale.ln(), (scale * 0.7).ln(), (scale * 1.2).ln()],
                rotation: random_unit_quat(&mut rng),
                opacity_logit: logit(0.85) as f32,
                sh,
            }
        })
        .collect();
    GaussianSet::new(gaussians, 1).unwrap()
}

/// `count` cameras on a ring of radius 4 around the origin, alternating
/// slightly above and below the equator.
pub fn ring_cameras(count: usize, size: usize) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / count as f64;
            let y = if k % 2 == 0 { 0.8 } else { -0.8 };
            Camera::look_at(
                size,
                size,
                size as f64 * 1.2,
                Vector3::new(4.0 * a.sin(), y, -4.0 * a.cos()),
                Vector3::zeros(),
                Vector3::new(0.0, -1.0, 0.0),
            )
            .unwrap()
        })
        .collect()
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller; avoids pulling in a distributions crate for tests
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Position noise `pos_sigma`; colour noise `color_sigma` on every SH
/// coefficient (in colour units, i.e. DC scaled by `1/Y00`); smaller noise
/// on log-scales, opacity logits and rotations.
pub fn perturb(set: &GaussianSet, pos_sigma: f64, color_sigma: f64, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    for g in out.gaussians.iter_mut() {
        for p in g.position.iter_mut() {
            *p += (pos_sigma * gauss(&mut rng)) as f32;
        }
        for s in g.log_scale.iter_mut() {
            *s += (0.1 * gauss(&mut rng)) as f32;
        }
        for q in g.rotation.iter_mut() {
            *q += (0.05 * gauss(&mut rng)) as f32;
        }
        g.normalize_rotation();
        g.opacity_logit += (0.3 * gauss(&mut rng)) as f32;
        for (k, c) in g.sh.coeffs_mut().iter_mut().enumerate() {
            let unit = if k == 0 { 1.0 / SH_C0 } else { 1.0 };
            for v in c.iter_mut() {
                *v += (color_sigma * unit * gauss(&mut rng)) as f32;
            }
        }
    }
    out
}

/// Writes `cameras.json` and one PNG per camera (rendered from `gt`) into
/// `dir`, returning the camera file path.
pub fn write_rig(dir: &std::path::Path, gt: &GaussianSet, cameras: &[Camera]) -> std::path::PathBuf {
    use patchsplat::io::cameras::{save_cameras, CameraId, CameraRecord};
    let cfg = patchsplat::RasterConfig::default();
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let records: Vec<CameraRecord> = cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let rel = format!("images/{k:03}.png");
            let img = patchsplat::raster::render(gt, cam, &cfg).unwrap();
            patchsplat::io::save_image(&img, dir.join(&rel)).unwrap();
            CameraRecord::from_camera(CameraId::Number(k as u64), cam, rel)
        })
        .collect();
    let path = dir.join("cameras.json");
    save_cameras(&path, &records).unwrap();
    path
}

/// Points on a jittered shell with colours, as binary PLY bytes.
pub fn shell_ply(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Vec::with_capacity(n);
    let mut col = Vec::with_capacity(n);
    for _ in 0..n {
        let v: [f64; 3] = std::array::from_fn(|_| gauss(&mut rng));
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        let radius = rng.gen_range(0.3..0.8);
        pos.push(v.map(|c| (c / r * radius) as f32));
        col.push(std::array::from_fn(|_| rng.gen_range(30u8..220)));
    }
    patchsplat::io::ply::write_ply_binary(&pos, &col)
}
