//! Photometric losses: L1, box-window SSIM / D-SSIM, stochastic patch SSIM,
//! total variation, and the two-phase combined objective. Every loss that
//! the trainer optimises also has an image-space gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;

/// Window size used for full-image D-SSIM.
pub const DSSIM_WINDOW: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k_switch: u64,
    /// Number of stochastic patch pairs.
    pub patches: usize,
    pub kernel: usize,
    pub stride: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 0.04,
            gamma: 0.02,
            k_switch: 25_000,
            patches: 10,
            kernel: 4,
            stride: 4,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::invalid("TV weights must be non-negative"));
        }
        if self.patches < 1 || self.kernel < 1 || self.stride < 1 {
            return Err(Error::invalid("patch count, kernel and stride must be at least 1"));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "d-ssim-phase")]
    DSsim,
    #[serde(rename = "p-ssim-phase")]
    PSsim,
}

impl Phase {
    pub fn for_iteration(iteration: u64, k_switch: u64) -> Phase {
        if iteration <= k_switch {
            Phase::DSsim
        } else {
            Phase::PSsim
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Phase::DSsim => "d-ssim-phase",
            Phase::PSsim => "p-ssim-phase",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(rendered: &ImageF, gt: &ImageF) -> Result<f64> {
    rendered.ensure_same_shape(gt)?;
    let n = rendered.data().len() as f64;
    Ok(rendered
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

pub fn l1_loss_grad(rendered: &ImageF, gt: &ImageF) -> Result<Vec<f64>> {
    rendered.ensure_same_shape(gt)?;
    let n = rendered.data().len() as f64;
    Ok(rendered
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| sign(a - b) / n)
        .collect())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub kernel: usize,
    pub stride: usize,
    pub c1: f64,
    pub c2: f64,
}

fn window_starts(dim: usize, kernel: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..=dim - kernel).step_by(stride)
}

/// SSIM averaged over `kernel × kernel` box windows placed every `stride`
/// pixels, per channel, then averaged over channels. When `grad` is given it
/// receives `∂SSIM/∂a` (interleaved like the image data).
fn ssim_impl(a: &ImageF, b: &ImageF, p: SsimParams, mut grad: Option<&mut [f64]>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if p.kernel == 0 || p.stride == 0 {
        return Err(Error::invalid("SSIM kernel and stride must be positive"));
    }
    if p.kernel > h || p.kernel > w {
        return Err(Error::KernelTooLarge {
            kernel: p.kernel,
            height: h,
            width: w,
        });
    }
    let k = p.kernel;
    let n = (k * k) as f64;
    let rows: Vec<usize> = window_starts(h, k, p.stride).collect();
    let cols: Vec<usize> = window_starts(w, k, p.stride).collect();
    let windows = (rows.len() * cols.len() * c) as f64;
    let (ad, bd) = (a.data(), b.data());

    let mut total = 0.0;
    for ch in 0..c {
        for &r0 in &rows {
            for &c0 in &cols {
                let (mut sx, mut sy) = (0.0, 0.0);
                for r in r0..r0 + k {
                    for cc in c0..c0 + k {
                        let i = a.index(r, cc, ch);
                        sx += ad[i];
                        sy += bd[i];
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for r in r0..r0 + k {
                    for cc in c0..c0 + k {
                        let i = a.index(r, cc, ch);
                        let (dx, dy) = (ad[i] - mx, bd[i] - my);
                        vx += dx * dx;
                        vy += dy * dy;
                        cxy += dx * dy;
                    }
                }
                let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
                let a1 = 2.0 * mx * my + p.c1;
                let a2 = 2.0 * cxy + p.c2;
                let b1 = mx * mx + my * my + p.c1;
                let b2 = vx + vy + p.c2;
                let s = a1 * a2 / (b1 * b2);
                total += s;
                if let Some(g) = grad.as_deref_mut() {
                    let scale = 2.0 / (n * windows);
                    let common = my * a2 / (b1 * b2) - s * mx / b1;
                    for r in r0..r0 + k {
                        for cc in c0..c0 + k {
                            let i = a.index(r, cc, ch);
                            let local = a1 * (bd[i] - my) / (b1 * b2) - s * (ad[i] - mx) / b2;
                            g[i] += scale * (common + local);
                        }
                    }
                }
            }
        }
    }
    Ok(total / windows)
}

pub fn ssim(rendered: &ImageF, gt: &ImageF, params: SsimParams) -> Result<f64> {
    ssim_impl(rendered, gt, params, None)
}

/// SSIM and its gradient with respect to `rendered`.
pub fn ssim_with_grad(rendered: &ImageF, gt: &ImageF, params: SsimParams) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; rendered.data().len()];
    let v = ssim_impl(rendered, gt, params, Some(&mut g))?;
    Ok((v, g))
}

fn dssim_params(img: &ImageF, cfg: &LossConfig) -> SsimParams {
    SsimParams {
        kernel: DSSIM_WINDOW.min(img.height()).min(img.width()),
        stride: 1,
        c1: cfg.ssim_c1,
        c2: cfg.ssim_c2,
    }
}

/// `1 - SSIM` with a dense 11×11 box window (shrunk to fit small images).
pub fn d_ssim_loss(rendered: &ImageF, gt: &ImageF, cfg: &LossConfig) -> Result<f64> {
    Ok(1.0 - ssim(rendered, gt, dssim_params(rendered, cfg))?)
}

pub fn d_ssim_loss_with_grad(rendered: &ImageF, gt: &ImageF, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (s, mut g) = ssim_with_grad(rendered, gt, dssim_params(rendered, cfg))?;
    g.iter_mut().for_each(|v| *v = -*v);
    Ok((1.0 - s, g))
}

/// A pseudo-patch: pixels gathered from both images by the same index list
/// and laid out row-major as `patch_height × patch_width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub pixel_indices: Vec<usize>,
    pub patch_height: usize,
    pub patch_width: usize,
}

/// Most-square `rows × cols` factorisation of `n` with `rows ≤ cols`.
fn square_fold(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Contiguous pixel ranges and patch shapes. With `count ≤ h` the image is
/// split into row bands, otherwise into raster-order runs. A single patch
/// keeps the image's own shape; otherwise each run is laid out as the most
/// square rectangle holding exactly its pixels.
fn patch_layout(h: usize, w: usize, count: usize) -> Result<Vec<(std::ops::Range<usize>, usize, usize)>> {
    let pixels = h * w;
    if count == 0 {
        return Err(Error::invalid("patch count must be at least 1"));
    }
    if count > pixels {
        return Err(Error::TooManyPatches {
            requested: count,
            pixels,
        });
    }
    if count == 1 {
        return Ok(vec![(0..pixels, h, w)]);
    }
    Ok((0..count)
        .map(|b| {
            let range = if count <= h {
                (b * h / count) * w..((b + 1) * h / count) * w
            } else {
                b * pixels / count..(b + 1) * pixels / count
            };
            let (ph, pw) = square_fold(range.len());
            (range, ph, pw)
        })
        .collect())
}

/// Bands in raster order without shuffling.
pub fn identity_patches(h: usize, w: usize, count: usize) -> Result<Vec<PatchPair>> {
    Ok(patch_layout(h, w, count)?
        .into_iter()
        .map(|(range, ph, pw)| PatchPair {
            pixel_indices: range.collect(),
            patch_height: ph,
            patch_width: pw,
        })
        .collect())
}

/// Splits the image into `count` near-equal contiguous bands and shuffles the
/// pixels of each band with a seeded permutation.
pub fn sample_stochastic_patches(seed: u64, h: usize, w: usize, count: usize) -> Result<Vec<PatchPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = identity_patches(h, w, count)?;
    for p in &mut pairs {
        p.pixel_indices.shuffle(&mut rng);
    }
    Ok(pairs)
}

fn pssim_params(cfg: &LossConfig) -> SsimParams {
    SsimParams {
        kernel: cfg.kernel,
        stride: cfg.stride,
        c1: cfg.ssim_c1,
        c2: cfg.ssim_c2,
    }
}

fn p_ssim_impl(
    rendered: &ImageF,
    gt: &ImageF,
    pairs: &[PatchPair],
    cfg: &LossConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    rendered.ensure_same_shape(gt)?;
    if pairs.is_empty() {
        return Err(Error::invalid("no patch pairs"));
    }
    let params = pssim_params(cfg);
    let c = rendered.channels();
    let inv_p = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let r = rendered.gather(&pair.pixel_indices, pair.patch_height, pair.patch_width)?;
        let g = gt.gather(&pair.pixel_indices, pair.patch_height, pair.patch_width)?;
        match grad.as_deref_mut() {
            None => total += ssim(&r, &g, params)?,
            Some(out) => {
                let (s, pg) = ssim_with_grad(&r, &g, params)?;
                total += s;
                for (slot, &src) in pair.pixel_indices.iter().enumerate() {
                    for ch in 0..c {
                        out[src * c + ch] += inv_p * pg[slot * c + ch];
                    }
                }
            }
        }
    }
    Ok(total * inv_p)
}

/// Mean SSIM over stochastic patch pairs.
pub fn p_ssim(rendered: &ImageF, gt: &ImageF, pairs: &[PatchPair], cfg: &LossConfig) -> Result<f64> {
    p_ssim_impl(rendered, gt, pairs, cfg, None)
}

pub fn p_ssim_loss(rendered: &ImageF, gt: &ImageF, pairs: &[PatchPair], cfg: &LossConfig) -> Result<f64> {
    Ok(1.0 - p_ssim(rendered, gt, pairs, cfg)?)
}

pub fn p_ssim_loss_with_grad(
    rendered: &ImageF,
    gt: &ImageF,
    pairs: &[PatchPair],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; rendered.data().len()];
    let s = p_ssim_impl(rendered, gt, pairs, cfg, Some(&mut g))?;
    g.iter_mut().for_each(|v| *v = -*v);
    Ok((1.0 - s, g))
}

/// Sum of absolute differences between vertically and horizontally adjacent
/// pixels, divided by `c·h·w`.
pub fn tv_loss(img: &ImageF) -> f64 {
    tv_impl(img, None)
}

pub fn tv_loss_with_grad(img: &ImageF) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; img.data().len()];
    let v = tv_impl(img, Some(&mut g));
    (v, g)
}

fn tv_impl(img: &ImageF, mut grad: Option<&mut [f64]>) -> f64 {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let norm = (c * h * w) as f64;
    let d = img.data();
    let mut total = 0.0;
    let mut pair = |i: usize, j: usize, grad: &mut Option<&mut [f64]>| {
        let diff = d[i] - d[j];
        total += diff.abs();
        if let Some(g) = grad.as_deref_mut() {
            let s = sign(diff) / norm;
            g[i] += s;
            g[j] -= s;
        }
    };
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let i = img.index(r, col, ch);
                if r + 1 < h {
                    pair(i, img.index(r + 1, col, ch), &mut grad);
                }
                if col + 1 < w {
                    pair(i, img.index(r, col + 1, ch), &mut grad);
                }
            }
        }
    }
    total / norm
}

/// Loss components for one iteration; `structural` is D-SSIM or P-SSIM loss
/// depending on the phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub structural: f64,
    pub tv: f64,
}

/// `(1-λ)·L1 + λ·L_D-SSIM + β·TV` while `iteration ≤ k_switch`, then
/// `(1-λ)·L1 + λ·L_P-SSIM + γ·TV`.
pub fn total_loss(iteration: u64, l1: f64, dssim: f64, pssim: f64, tv: f64, cfg: &LossConfig) -> (f64, Phase) {
    let phase = Phase::for_iteration(iteration, cfg.k_switch);
    let value = match phase {
        Phase::DSsim => (1.0 - cfg.lambda) * l1 + cfg.lambda * dssim + cfg.beta * tv,
        Phase::PSsim => (1.0 - cfg.lambda) * l1 + cfg.lambda * pssim + cfg.gamma * tv,
    };
    (value, phase)
}

/// Value and image gradient of the phase-appropriate total loss.
pub fn total_loss_with_grad(
    iteration: u64,
    rendered: &ImageF,
    gt: &ImageF,
    cfg: &LossConfig,
) -> Result<(f64, Phase, LossTerms, Vec<f64>)> {
    let phase = Phase::for_iteration(iteration, cfg.k_switch);
    let l1 = l1_loss(rendered, gt)?;
    let g_l1 = l1_loss_grad(rendered, gt)?;
    let (tv, g_tv) = tv_loss_with_grad(rendered);
    let (structural, g_s) = match phase {
        Phase::DSsim => d_ssim_loss_with_grad(rendered, gt, cfg)?,
        Phase::PSsim => {
            let pairs = sample_stochastic_patches(
                patch_seed(cfg.seed, iteration),
                rendered.height(),
                rendered.width(),
                cfg.patches,
            )?;
            p_ssim_loss_with_grad(rendered, gt, &pairs, cfg)?
        }
    };
    let (value, _) = match phase {
        Phase::DSsim => total_loss(iteration, l1, structural, 0.0, tv, cfg),
        Phase::PSsim => total_loss(iteration, l1, 0.0, structural, tv, cfg),
    };
    let tv_w = match phase {
        Phase::DSsim => cfg.beta,
        Phase::PSsim => cfg.gamma,
    };
    let grad = g_l1
        .iter()
        .zip(&g_s)
        .zip(&g_tv)
        .map(|((a, b), c)| (1.0 - cfg.lambda) * a + cfg.lambda * b + tv_w * c)
        .collect();
    Ok((value, phase, LossTerms { l1, structural, tv }, grad))
}

/// Seed for the patch permutation of a given iteration.
pub fn patch_seed(seed: u64, iteration: u64) -> u64 {
    // splitmix64 of the pair, so neighbouring iterations get unrelated streams
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
