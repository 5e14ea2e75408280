//! Gaussian primitives, covariance construction, point-cloud initialisation
//! (standard and distance/opacity-driven SH), pruning, and SH variance
//! diagnostics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::{self, coeff_count, SH_C0};

/// Opacity assigned to every freshly initialised Gaussian.
pub const INITIAL_OPACITY: f64 = 0.1;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} colours",
                positions.len(),
                colors.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite point position"));
        }
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("colour channel outside [0, 1]"));
        }
        Ok(Self { positions, colors })
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-Gaussian SH coefficient bank, `(degree + 1)²` RGB rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShBank {
    degree: usize,
    coeffs: Vec<[f32; 3]>,
}

impl ShBank {
    pub fn zeros(degree: usize) -> Self {
        Self {
            degree,
            coeffs: vec![[0.0; 3]; coeff_count(degree)],
        }
    }

    pub fn from_coeffs(degree: usize, coeffs: Vec<[f32; 3]>) -> Result<Self> {
        if coeffs.len() != coeff_count(degree) {
            return Err(Error::ShapeMismatch(format!(
                "degree {degree} needs {} SH rows, got {}",
                coeff_count(degree),
                coeffs.len()
            )));
        }
        Ok(Self { degree, coeffs })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[[f32; 3]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.coeffs
    }

    /// Colour seen along `view_dir`; see [`sh::eval_sh`].
    pub fn eval(&self, view_dir: [f64; 3]) -> Result<[f64; 3]> {
        sh::eval_sh(&self.coeffs, view_dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub position: [f32; 3],
    pub log_scale: [f32; 3],
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f32; 4],
    pub opacity_logit: f32,
    pub sh: ShBank,
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(
            self.log_scale.map(f64::from),
            self.rotation.map(f64::from),
        )
    }

    pub fn normalize_rotation(&mut self) {
        let q = self.rotation.map(f64::from);
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n > 0.0 && n.is_finite() {
            self.rotation = q.map(|v| (v / n) as f32);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
    pub max_degree: usize,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian3D>, max_degree: usize) -> Result<Self> {
        if let Some(g) = gaussians.iter().find(|g| g.sh.degree > max_degree) {
            return Err(Error::invalid(format!(
                "SH degree {} exceeds max degree {max_degree}",
                g.sh.degree
            )));
        }
        Ok(Self {
            gaussians,
            max_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceNormalizer {
    #[default]
    Median,
    None,
}

/// Which higher-order coefficients receive the distance-modulated value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HigherOrderFill {
    /// Every coefficient of bands 1..=D gets `v / ((D+1)² - 1)`.
    #[default]
    Uniform,
    /// Only the last coefficient (index `(D+1)² - 1`) gets `v`, undamped.
    LastOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShInitMode {
    Standard,
    #[default]
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShInitConfig {
    pub max_degree: usize,
    pub distance_scale: f64,
    pub neighbor_count: usize,
    pub distance_normalizer: DistanceNormalizer,
    pub higher_fill: HigherOrderFill,
}

impl Default for ShInitConfig {
    fn default() -> Self {
        Self {
            max_degree: 5,
            distance_scale: 1.0,
            neighbor_count: 3,
            distance_normalizer: DistanceNormalizer::Median,
            higher_fill: HigherOrderFill::Uniform,
        }
    }
}

impl ShInitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_degree < 1 {
            return Err(Error::invalid("max SH degree must be at least 1"));
        }
        if !(self.distance_scale > 0.0 && self.distance_scale.is_finite()) {
            return Err(Error::invalid("distance scale must be positive"));
        }
        if self.neighbor_count < 1 {
            return Err(Error::invalid("neighbour count must be at least 1"));
        }
        Ok(())
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `U · diag(exp(log_scale))² · Uᵀ` with `U` the rotation of `rotation`.
pub fn build_covariance(log_scale: [f64; 3], rotation: [f64; 4]) -> Result<Matrix3<f64>> {
    if log_scale.iter().chain(&rotation).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite covariance parameters"));
    }
    let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "rotation quaternion must be unit length, got norm {norm}"
        )));
    }
    Ok(covariance_unchecked(log_scale, rotation))
}

pub(crate) fn covariance_unchecked(log_scale: [f64; 3], rotation: [f64; 4]) -> Matrix3<f64> {
    let u = quat_to_matrix(rotation);
    let s = Vector3::from(log_scale.map(f64::exp));
    let m = u * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // exact symmetry
    (cov + cov.transpose()) * 0.5
}

/// Mean distance from each point to its `k` nearest neighbours, optionally
/// divided by the median of those means.
pub fn knn_mean_distance(
    cloud: &PointCloud,
    k: usize,
    normalizer: DistanceNormalizer,
) -> Result<Vec<f64>> {
    let n = cloud.count();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n <= k {
        return Err(Error::InsufficientPoints { count: n, k });
    }
    let pts = cloud.positions();
    let mut out = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, p) in pts.iter().enumerate() {
        dists.clear();
        for (j, q) in pts.iter().enumerate() {
            if i != j {
                let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                dists.push(d2.sqrt());
            }
        }
        dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        let mean = dists[..k].iter().sum::<f64>() / k as f64;
        out.push(mean);
    }
    if normalizer == DistanceNormalizer::Median {
        let med = median(&out);
        if med > 0.0 {
            for v in &mut out {
                *v /= med;
            }
        }
    }
    Ok(out)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `D = max(1, min(round(d), M))`, `ν = (D + 1)²`. Rounds half away from zero,
/// which is half-up for the non-negative distances used here.
pub fn assign_sh_degree(d: f64, max_degree: usize) -> (usize, usize) {
    let rounded = if d.is_finite() { d.round().max(0.0) } else { 0.0 };
    let degree = (rounded.min(max_degree as f64) as usize).max(1);
    (degree, coeff_count(degree))
}

/// Opacity-weighted base colour `rgb × α`.
pub fn opacity_weighted_color(rgb: [f64; 3], opacity: f64) -> [f64; 3] {
    rgb.map(|c| c * opacity)
}

/// DC coefficient for an opacity-weighted initial colour: `α (rgb - 0.5) / Y₀₀`,
/// so the rendered DC colour is `α·rgb + (1 - α)·0.5`, i.e. the opacity-weighted
/// colour composited against the mid-grey offset.
pub fn init_sh_dc(rgb: [f64; 3], opacity: f64) -> Result<[f64; 3]> {
    if !(opacity > 0.0 && opacity < 1.0) {
        return Err(Error::invalid(format!(
            "opacity must lie in (0, 1), got {opacity}"
        )));
    }
    if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid("colour channel outside [0, 1]"));
    }
    Ok(rgb.map(|c| opacity * (c - sh::COLOR_OFFSET) / SH_C0))
}

/// Base value `rgb × α × (1 - e^{-s·d})` for the higher-order coefficients.
pub fn higher_order_base(rgb: [f64; 3], opacity: f64, d: f64, s: f64) -> [f64; 3] {
    let falloff = 1.0 - (-s * d).exp();
    rgb.map(|c| c * opacity * falloff)
}

/// Per-coefficient value written into every coefficient of bands `1..=degree`
/// under [`HigherOrderFill::Uniform`].
pub fn init_sh_higher(rgb: [f64; 3], opacity: f64, d: f64, s: f64, degree: usize) -> [f64; 3] {
    let count = (coeff_count(degree) - 1).max(1) as f64;
    higher_order_base(rgb, opacity, d, s).map(|v| v / count)
}

fn fill_higher(
    bank: &mut ShBank,
    rgb: [f64; 3],
    opacity: f64,
    d: f64,
    s: f64,
    fill: HigherOrderFill,
) {
    let degree = bank.degree;
    match fill {
        HigherOrderFill::Uniform => {
            let v = init_sh_higher(rgb, opacity, d, s, degree).map(|x| x as f32);
            for c in &mut bank.coeffs[1..] {
                *c = v;
            }
        }
        HigherOrderFill::LastOnly => {
            let v = higher_order_base(rgb, opacity, d, s).map(|x| x as f32);
            let last = bank.coeffs.len() - 1;
            bank.coeffs[last] = v;
        }
    }
}

/// One Gaussian per point. Scales are isotropic at the (un-normalised) mean
/// neighbour distance; rotation identity; opacity [`INITIAL_OPACITY`].
pub fn init_scene(cloud: &PointCloud, cfg: &ShInitConfig, mode: ShInitMode) -> Result<GaussianSet> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::invalid("point cloud is empty"));
    }
    let k = cfg.neighbor_count;
    let n = cloud.count();
    // a lone point has no neighbours; give it unit scale
    let raw = if n > k {
        knn_mean_distance(cloud, k, DistanceNormalizer::None)?
    } else if n > 1 {
        knn_mean_distance(cloud, n - 1, DistanceNormalizer::None)?
    } else {
        vec![1.0]
    };
    let scaled = match cfg.distance_normalizer {
        DistanceNormalizer::None => raw.clone(),
        DistanceNormalizer::Median => {
            let med = median(&raw);
            if med > 0.0 {
                raw.iter().map(|d| d / med).collect()
            } else {
                raw.clone()
            }
        }
    };
    let opacity = INITIAL_OPACITY;
    let opacity_logit = logit(opacity) as f32;

    let mut gaussians = Vec::with_capacity(n);
    for i in 0..n {
        let rgb = cloud.colors()[i];
        let p = cloud.positions()[i];
        let ls = raw[i].max(1e-7).ln() as f32;
        let sh = match mode {
            ShInitMode::Standard => {
                let mut bank = ShBank::zeros(cfg.max_degree);
                bank.coeffs[0] = rgb.map(|c| ((c - sh::COLOR_OFFSET) / SH_C0) as f32);
                bank
            }
            ShInitMode::Dynamic => {
                let d = scaled[i];
                let (degree, _) = assign_sh_degree(d, cfg.max_degree);
                let mut bank = ShBank::zeros(degree);
                bank.coeffs[0] = init_sh_dc(rgb, opacity)?.map(|v| v as f32);
                fill_higher(&mut bank, rgb, opacity, d, cfg.distance_scale, cfg.higher_fill);
                bank
            }
        };
        gaussians.push(Gaussian3D {
            position: p.map(|v| v as f32),
            log_scale: [ls; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit,
            sh,
        });
    }
    GaussianSet::new(gaussians, cfg.max_degree)
}

/// Indices of Gaussians whose opacity is at least `threshold`.
pub fn prune_mask(set: &GaussianSet, threshold: f64) -> Vec<bool> {
    set.gaussians
        .iter()
        .map(|g| g.opacity() >= threshold)
        .collect()
}

/// Removes every Gaussian with `sigmoid(opacity_logit) < threshold`.
pub fn prune(set: &GaussianSet, threshold: f64) -> Result<GaussianSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "prune threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let keep = prune_mask(set, threshold);
    let gaussians: Vec<_> = set
        .gaussians
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(g, _)| g.clone())
        .collect();
    if gaussians.is_empty() {
        return Err(Error::EmptyScene { threshold });
    }
    Ok(GaussianSet {
        gaussians,
        max_degree: set.max_degree,
    })
}

/// Population variance of all coefficient entries of each band `0..=max_degree`,
/// pooled across Gaussians and colour channels. A Gaussian whose degree is
/// below a band contributes zeros for that band's `(2l + 1) × 3` entries.
pub fn sh_variance_report(set: &GaussianSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::invalid("variance report needs a non-empty scene"));
    }
    let mut report = Vec::with_capacity(set.max_degree + 1);
    for band in 0..=set.max_degree {
        let lo = band * band;
        let hi = coeff_count(band);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        // two passes for accuracy: mean first
        for g in &set.gaussians {
            for idx in lo..hi {
                let row = g.sh.coeffs.get(idx).copied().unwrap_or([0.0; 3]);
                for v in row {
                    sum += v as f64;
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        for g in &set.gaussians {
            for idx in lo..hi {
                let row = g.sh.coeffs.get(idx).copied().unwrap_or([0.0; 3]);
                for v in row {
                    sum_sq += (v as f64 - mean).powi(2);
                }
            }
        }
        report.push(sum_sq / count as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gaussian_with(opacity: f64, dc: [f32; 3]) -> Gaussian3D {
        let mut sh = ShBank::zeros(1);
        sh.coeffs[0] = dc;
        Gaussian3D {
            position: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity) as f32,
            sh,
        }
    }

    #[test]
    fn covariance_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let c = build_covariance([0.0; 3], id).unwrap();
        assert_abs_diff_eq!(c, Matrix3::identity(), epsilon = 1e-15);

        let c = build_covariance([1f64.ln(), 2f64.ln(), 3f64.ln()], id).unwrap();
        assert_abs_diff_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)), epsilon = 1e-12);

        let h = std::f64::consts::FRAC_PI_4;
        let rz = [h.cos(), 0.0, 0.0, h.sin()];
        let c = build_covariance([0.0; 3], rz).unwrap();
        assert_abs_diff_eq!(c, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(build_covariance([f64::NAN, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(build_covariance([0.0; 3], [2.0, 0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(
            ls in prop::array::uniform3(-3.0f64..2.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(n > 1e-3);
            let q = q.map(|v| v / n);
            let c = build_covariance(ls, q).unwrap();
            prop_assert!((c - c.transpose()).abs().max() <= 1e-7 * c.abs().max().max(1.0));
            let eig = c.symmetric_eigenvalues();
            let tol = 1e-9 * c.abs().max().max(1.0);
            prop_assert!(eig.iter().all(|&e| e >= -tol));
        }

        #[test]
        fn degree_assignment_in_range(d in 0.0f64..50.0, m in 1usize..8) {
            let (deg, nu) = assign_sh_degree(d, m);
            prop_assert!(deg >= 1 && deg <= m);
            prop_assert_eq!(nu, (deg + 1) * (deg + 1));
        }
    }

    #[test]
    fn knn_examples() {
        let two = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[0.0; 3]; 2]).unwrap();
        assert_eq!(knn_mean_distance(&two, 1, DistanceNormalizer::None).unwrap(), vec![1.0, 1.0]);

        let three = PointCloud::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            vec![[0.0; 3]; 3],
        )
        .unwrap();
        let d = knn_mean_distance(&three, 1, DistanceNormalizer::None).unwrap();
        assert_eq!(d, vec![1.0, 1.0, 2.0]);
        let dn = knn_mean_distance(&three, 1, DistanceNormalizer::Median).unwrap();
        assert_eq!(median(&dn), 1.0);

        assert!(matches!(
            knn_mean_distance(&two, 2, DistanceNormalizer::None),
            Err(Error::InsufficientPoints { count: 2, k: 2 })
        ));
    }

    #[test]
    fn degree_examples() {
        assert_eq!(assign_sh_degree(3.0, 5), (3, 16));
        assert_eq!(assign_sh_degree(0.2, 5), (1, 4));
        assert_eq!(assign_sh_degree(9.7, 5), (5, 36));
        assert_eq!(assign_sh_degree(2.5, 5), (3, 16));
    }

    #[test]
    fn dc_init_examples() {
        assert_eq!(opacity_weighted_color([1.0, 0.0, 0.0], 0.5), [0.5, 0.0, 0.0]);
        let g = [0.3; 3];
        let near_one = opacity_weighted_color(g, 1.0 - 1e-12);
        for c in near_one {
            assert_abs_diff_eq!(c, 0.3, epsilon = 1e-11);
        }
        assert!(opacity_weighted_color([0.9, 0.4, 1.0], 1e-12).iter().all(|c| *c < 1e-11));

        // rendered DC colour composites rgb·α over the 0.5 offset
        let dc = init_sh_dc([1.0, 0.0, 0.0], 0.5).unwrap();
        let col = sh::eval_sh(&[dc.map(|v| v as f32)], [0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(col[0], 0.5 + 0.5 * 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(col[1], 0.5 * 0.5, epsilon = 1e-6);

        assert!(init_sh_dc([0.5; 3], 0.0).is_err());
        assert!(init_sh_dc([0.5; 3], 1.0).is_err());
    }

    #[test]
    fn higher_init_examples() {
        let v = higher_order_base([1.0; 3], 1.0, 2f64.ln(), 1.0);
        for c in v {
            assert_abs_diff_eq!(c, 0.5, epsilon = 1e-15);
        }
        assert_eq!(higher_order_base([0.7, 0.2, 0.9], 0.4, 0.0, 1.0), [0.0; 3]);
        let far = higher_order_base([0.7, 0.2, 0.9], 0.4, 1e3, 1.0);
        assert_abs_diff_eq!(far[0], 0.28, epsilon = 1e-12);
        // uniform fill damps by the number of higher coefficients
        let per = init_sh_higher([1.0; 3], 1.0, 2f64.ln(), 1.0, 2);
        assert_abs_diff_eq!(per[0], 0.5 / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_distance_leaves_higher_terms_zero() {
        let mut bank = ShBank::zeros(3);
        fill_higher(&mut bank, [0.8, 0.1, 0.4], 0.1, 0.0, 1.0, HigherOrderFill::Uniform);
        assert!(bank.coeffs[1..].iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn last_only_fill_touches_one_coefficient() {
        let mut bank = ShBank::zeros(2);
        fill_higher(&mut bank, [1.0; 3], 1.0, 2f64.ln(), 1.0, HigherOrderFill::LastOnly);
        assert!(bank.coeffs[1..8].iter().flatten().all(|v| *v == 0.0));
        assert_abs_diff_eq!(bank.coeffs[8][0], 0.5, epsilon = 1e-7);
    }

    fn varied_cloud() -> PointCloud {
        let positions = vec![
            [0.0, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [0.0, 0.6, 0.0],
            [0.0, 0.0, 0.7],
            [2.0, 2.0, 0.0],
            [-2.5, 0.5, 1.0],
            [3.0, -3.0, 2.0],
        ];
        let colors = vec![
            [0.9, 0.1, 0.2],
            [0.2, 0.8, 0.3],
            [0.1, 0.2, 0.9],
            [0.6, 0.6, 0.1],
            [0.3, 0.9, 0.9],
            [1.0, 0.5, 0.0],
            [0.4, 0.4, 0.4],
        ];
        PointCloud::new(positions, colors).unwrap()
    }

    #[test]
    fn standard_init_has_zero_higher_variance() {
        let set = init_scene(&varied_cloud(), &ShInitConfig::default(), ShInitMode::Standard).unwrap();
        let report = sh_variance_report(&set).unwrap();
        assert_eq!(report.len(), 6);
        assert!(report[0] > 0.0);
        assert!(report[1..].iter().all(|v| *v == 0.0));
        assert!(set.gaussians.iter().all(|g| g.sh.degree() == 5));
    }

    #[test]
    fn dynamic_init_engages_higher_bands() {
        let cfg = ShInitConfig { max_degree: 3, ..Default::default() };
        let set = init_scene(&varied_cloud(), &cfg, ShInitMode::Dynamic).unwrap();
        let degrees: Vec<_> = set.gaussians.iter().map(|g| g.sh.degree()).collect();
        assert!(degrees.iter().any(|d| *d >= 2), "{degrees:?}");
        let report = sh_variance_report(&set).unwrap();
        assert!(report[1] > 0.0 && report[2] > 0.0, "{report:?}");
        for g in &set.gaussians {
            assert_abs_diff_eq!(g.opacity(), INITIAL_OPACITY, epsilon = 1e-6);
            assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn single_colour_regular_cloud_has_flat_degree_one() {
        // regular tetrahedron: all neighbour distances equal
        let positions = vec![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ];
        let cloud = PointCloud::new(positions, vec![[0.6; 3]; 4]).unwrap();
        let set = init_scene(&cloud, &ShInitConfig::default(), ShInitMode::Dynamic).unwrap();
        let report = sh_variance_report(&set).unwrap();
        assert_eq!(report[1], 0.0);
    }

    #[test]
    fn prune_examples() {
        let set = GaussianSet::new(
            vec![
                gaussian_with(0.004, [0.1; 3]),
                gaussian_with(0.3, [0.2; 3]),
                gaussian_with(0.0049, [0.3; 3]),
            ],
            1,
        )
        .unwrap();
        let pruned = prune(&set, 0.005).unwrap();
        assert_eq!(pruned.len(), 1);
        assert_eq!(pruned.gaussians[0], set.gaussians[1]);
        assert_eq!(prune(&set, 0.0).unwrap(), set);
        assert_eq!(prune(&pruned, 0.005).unwrap(), pruned);
        assert!(matches!(prune(&set, 0.9), Err(Error::EmptyScene { .. })));
        assert!(prune(&set, 1.5).is_err());

        let half = GaussianSet::new(vec![gaussian_with(0.5, [0.0; 3]); 4], 1).unwrap();
        assert_eq!(prune(&half, 0.005).unwrap(), half);
    }

    #[test]
    fn variance_of_two_dc_terms() {
        let set = GaussianSet::new(
            vec![gaussian_with(0.5, [0.2, 1.0, -0.4]), gaussian_with(0.5, [0.6, 0.0, 0.4])],
            1,
        )
        .unwrap();
        let report = sh_variance_report(&set).unwrap();
        // brute force over the six pooled entries
        let vals = [0.2f32, 1.0, -0.4, 0.6, 0.0, 0.4].map(f64::from);
        let m = vals.iter().sum::<f64>() / 6.0;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0;
        assert_abs_diff_eq!(report[0], var, epsilon = 1e-12);
        assert_eq!(report[1], 0.0);
    }
}
