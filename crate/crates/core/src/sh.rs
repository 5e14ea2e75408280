//! Real spherical-harmonic basis of arbitrary degree and view-dependent colour.
//!
//! Coefficient `l² + l + m` holds band `l`, order `m ∈ [-l, l]`. The basis
//! carries the Condon–Shortley phase, so bands 0..=3 agree term-for-term with
//! the constants used by common splatting renderers (`-C1·y, C1·z, -C1·x`, ...).
//!
//! The basis is evaluated through a Cartesian recurrence, which keeps it a
//! polynomial in `(x, y, z)` and lets the same code produce gradients with
//! respect to the direction via forward-mode dual numbers.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Value of the degree-0 basis function, `1 / (2√π)`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Colour offset added to the SH expansion before clamping.
pub const COLOR_OFFSET: f64 = 0.5;

pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Band of a linear coefficient index.
pub fn band_of(index: usize) -> usize {
    (index as f64).sqrt().floor() as usize
}

trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn scale(self, k: f64) -> Self;
    fn constant(k: f64) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn constant(k: f64) -> Self {
        k
    }
}

/// Value plus gradient with respect to (x, y, z).
#[derive(Clone, Copy, Debug)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Add for Dual3 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual3 {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual3 {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual3 {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Scalar for Dual3 {
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual3 {
            v: self.v * k,
            d: [self.d[0] * k, self.d[1] * k, self.d[2] * k],
        }
    }
    #[inline]
    fn constant(k: f64) -> Self {
        Dual3 { v: k, d: [0.0; 3] }
    }
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l - m)! / (l + m)!
    let mut r = 1.0;
    for k in (l - m + 1)..=(l + m) {
        r /= k as f64;
    }
    r
}

fn normalization(l: usize, m: usize) -> f64 {
    ((2 * l + 1) as f64 / (4.0 * PI) * factorial_ratio(l, m)).sqrt()
}

fn basis_generic<T: Scalar>(x: T, y: T, z: T, degree: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), coeff_count(degree));
    // cos/sin parts of (x + iy)^m, i.e. sin^m θ · cos(mφ), sin^m θ · sin(mφ)
    let mut cm = T::constant(1.0);
    let mut sm = T::constant(0.0);
    // P̃_m^m = (-1)^m (2m-1)!!, the associated Legendre polynomial with the
    // sin^m θ factor removed.
    let mut pmm = 1.0f64;
    for m in 0..=degree {
        if m > 0 {
            let (c, s) = (x * cm - y * sm, x * sm + y * cm);
            cm = c;
            sm = s;
            pmm *= -((2 * m - 1) as f64);
        }
        let mut p_lm2 = T::constant(0.0);
        let mut p_lm1 = T::constant(pmm);
        for l in m..=degree {
            let p = if l == m {
                p_lm1
            } else if l == m + 1 {
                let p = z * p_lm1.scale((2 * m + 1) as f64);
                p_lm2 = p_lm1;
                p_lm1 = p;
                p
            } else {
                let p = (z * p_lm1.scale((2 * l - 1) as f64) - p_lm2.scale((l + m - 1) as f64))
                    .scale(1.0 / (l - m) as f64);
                p_lm2 = p_lm1;
                p_lm1 = p;
                p
            };
            let base = l * l + l;
            if m == 0 {
                out[base] = p.scale(normalization(l, 0));
            } else {
                let k = std::f64::consts::SQRT_2 * normalization(l, m);
                out[base + m] = (p * cm).scale(k);
                out[base - m] = (p * sm).scale(k);
            }
        }
    }
}

/// Evaluates all basis functions up to `degree` at `dir` (expected unit length).
pub fn sh_basis(dir: [f64; 3], degree: usize) -> Vec<f64> {
    let mut out = vec![0.0; coeff_count(degree)];
    basis_generic(dir[0], dir[1], dir[2], degree, &mut out);
    out
}

/// Basis values together with their partial derivatives with respect to the
/// three direction components (treating the polynomial as defined off the
/// sphere).
pub fn sh_basis_with_grad(dir: [f64; 3], degree: usize) -> (Vec<f64>, Vec<[f64; 3]>) {
    let mut out = vec![Dual3::constant(0.0); coeff_count(degree)];
    let seed = |i: usize, v: f64| {
        let mut d = [0.0; 3];
        d[i] = 1.0;
        Dual3 { v, d }
    };
    basis_generic(seed(0, dir[0]), seed(1, dir[1]), seed(2, dir[2]), degree, &mut out);
    (
        out.iter().map(|d| d.v).collect(),
        out.iter().map(|d| d.d).collect(),
    )
}

/// Raw (unclamped) colour `0.5 + Σ Y·c` per channel.
pub(crate) fn sh_color_raw(coeffs: &[[f32; 3]], basis: &[f64]) -> [f64; 3] {
    let mut c = [COLOR_OFFSET; 3];
    for (coef, &y) in coeffs.iter().zip(basis) {
        for ch in 0..3 {
            c[ch] += y * coef[ch] as f64;
        }
    }
    c
}

/// View-dependent colour of a coefficient bank: `clamp(0.5 + Σ Y_lm(dir)·c_lm, 0, 1)`
/// per channel. `coeffs.len()` must be a perfect square `(degree + 1)²`.
pub fn eval_sh(coeffs: &[[f32; 3]], view_dir: [f64; 3]) -> Result<[f64; 3]> {
    if view_dir.iter().any(|v| !v.is_finite()) || coeffs.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(Error::invalid("non-finite SH input"));
    }
    let norm = (view_dir[0].powi(2) + view_dir[1].powi(2) + view_dir[2].powi(2)).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "view direction must be unit length, got norm {norm}"
        )));
    }
    let degree = band_of(coeffs.len().max(1) - 1);
    if coeff_count(degree) != coeffs.len() {
        return Err(Error::invalid(format!(
            "{} SH coefficients is not a complete set of bands",
            coeffs.len()
        )));
    }
    let basis = sh_basis(view_dir, degree);
    Ok(sh_color_raw(coeffs, &basis).map(|v| v.clamp(0.0, 1.0)))
}
