//! Optimisation loop: render, loss, backward, Adam update, periodic pruning.
//!
//! Parameters are flattened per Gaussian in a fixed order (position,
//! log-scale, rotation, opacity logit, SH coefficients by index then
//! channel). The same order is used for Adam moments and checkpoints.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::losses::{self, LossConfig, Phase};
use crate::msrn::{self, MsrnModel};
use crate::raster::{self, GaussianGrad, GradientSet, RasterConfig};
use crate::scene::{self, Gaussian3D, GaussianSet, ShInitConfig};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const POSITION: usize = 0;
const LOG_SCALE: usize = 3;
const ROTATION: usize = 6;
const OPACITY: usize = 10;
const SH_DC: usize = 11;
const SH_REST: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity_logit: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 1.25e-4,
        }
    }
}

impl LearningRates {
    fn for_index(&self, k: usize) -> f64 {
        match k {
            k if k < LOG_SCALE => self.position,
            k if k < ROTATION => self.log_scale,
            k if k < OPACITY => self.rotation,
            OPACITY => self.opacity_logit,
            k if k < SH_REST => self.sh_dc,
            _ => self.sh_rest,
        }
    }

    fn all(&self) -> [f64; 6] {
        [
            self.position,
            self.log_scale,
            self.rotation,
            self.opacity_logit,
            self.sh_dc,
            self.sh_rest,
        ]
    }

    /// Same rates with every group multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            position: self.position * k,
            log_scale: self.log_scale * k,
            rotation: self.rotation * k,
            opacity_logit: self.opacity_logit * k,
            sh_dc: self.sh_dc * k,
            sh_rest: self.sh_rest * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub loss: LossConfig,
    pub sh_init: ShInitConfig,
    pub raster: RasterConfig,
    pub learning_rates: LearningRates,
    pub adam: AdamConfig,
    /// Prune every this many iterations; 0 disables pruning.
    pub prune_every: u64,
    pub prune_threshold: f64,
    /// Seeds the per-epoch camera order.
    pub seed: u64,
    /// Checkpoint cadence used by the command-line driver; 0 disables.
    pub checkpoint_every: u64,
    /// Cadence of PSNR and SH-variance records; 0 disables.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            loss: LossConfig::default(),
            sh_init: ShInitConfig::default(),
            raster: RasterConfig::default(),
            learning_rates: LearningRates::default(),
            adam: AdamConfig::default(),
            prune_every: 100,
            prune_threshold: 0.005,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self
            .learning_rates
            .all()
            .iter()
            .any(|lr| !(*lr > 0.0 && lr.is_finite()))
        {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::invalid("prune threshold must lie in [0, 1]"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps >= 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps be non-negative"));
        }
        self.loss.validate()?;
        self.sh_init.validate()?;
        self.raster.validate()
    }
}

pub fn param_count(g: &Gaussian3D) -> usize {
    SH_DC + 3 * g.sh.coeffs().len()
}

pub fn flatten_params(g: &Gaussian3D) -> Vec<f32> {
    let mut out = Vec::with_capacity(param_count(g));
    out.extend_from_slice(&g.position);
    out.extend_from_slice(&g.log_scale);
    out.extend_from_slice(&g.rotation);
    out.push(g.opacity_logit);
    out.extend(g.sh.coeffs().iter().flatten());
    out
}

pub fn unflatten_params(g: &mut Gaussian3D, flat: &[f32]) {
    debug_assert_eq!(flat.len(), param_count(g));
    g.position.copy_from_slice(&flat[POSITION..LOG_SCALE]);
    g.log_scale.copy_from_slice(&flat[LOG_SCALE..ROTATION]);
    g.rotation.copy_from_slice(&flat[ROTATION..OPACITY]);
    g.opacity_logit = flat[OPACITY];
    for (c, v) in g.sh.coeffs_mut().iter_mut().zip(flat[SH_DC..].chunks_exact(3)) {
        c.copy_from_slice(v);
    }
}

fn flatten_grad(g: &GaussianGrad) -> Vec<f64> {
    let mut out = Vec::with_capacity(SH_DC + 3 * g.sh.len());
    out.extend_from_slice(&g.position);
    out.extend_from_slice(&g.log_scale);
    out.extend_from_slice(&g.rotation);
    out.push(g.opacity_logit);
    out.extend(g.sh.iter().flatten());
    out
}

/// Adam moments, congruent with a [`GaussianSet`] in flattened order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(set: &GaussianSet) -> Self {
        let zeros: Vec<Vec<f32>> = set
            .gaussians
            .iter()
            .map(|g| vec![0.0; param_count(g)])
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn is_congruent(&self, set: &GaussianSet) -> bool {
        self.first.len() == set.len()
            && self.second.len() == set.len()
            && set
                .gaussians
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|(g, (m, v))| m.len() == param_count(g) && v.len() == param_count(g))
    }

    /// Keeps the moments of Gaussians whose `keep` entry is true.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.first.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.second.retain(|_| *k.next().unwrap());
    }
}

/// One Adam update. Returns `false` (and leaves everything untouched) when
/// any gradient is non-finite. Quaternions are renormalised afterwards.
pub fn adam_step(
    set: &mut GaussianSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: &LearningRates,
    adam: &AdamConfig,
) -> Result<bool> {
    if grads.grads.len() != set.len() || !state.is_congruent(set) {
        return Err(Error::ShapeMismatch(
            "gradients or optimizer state do not match the scene".into(),
        ));
    }
    if !grads.is_finite() {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    for (i, g) in set.gaussians.iter_mut().enumerate() {
        let grad = flatten_grad(&grads.grads[i]);
        if grad.len() != param_count(g) {
            return Err(Error::ShapeMismatch(format!("gradient {i} has the wrong length")));
        }
        let mut params = flatten_params(g);
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for k in 0..params.len() {
            let mk = adam.beta1 * m[k] as f64 + (1.0 - adam.beta1) * grad[k];
            let vk = adam.beta2 * v[k] as f64 + (1.0 - adam.beta2) * grad[k] * grad[k];
            m[k] = mk as f32;
            v[k] = vk as f32;
            let step = lr.for_index(k) * (mk / bc1) / ((vk / bc2).sqrt() + adam.eps);
            params[k] = (params[k] as f64 - step) as f32;
        }
        unflatten_params(g, &params);
        g.normalize_rotation();
    }
    Ok(true)
}

/// `10·log10(1 / MSE)`; infinite for identical images.
pub fn psnr(img: &ImageF, gt: &ImageF) -> Result<f64> {
    img.ensure_same_shape(gt)?;
    let n = img.data().len() as f64;
    let mse = img
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// PSNR as reported: capped at [`PSNR_CAP`].
pub fn psnr_capped(img: &ImageF, gt: &ImageF) -> Result<f64> {
    Ok(psnr(img, gt)?.min(PSNR_CAP))
}

/// Full-image SSIM with the dense window used by the D-SSIM loss.
pub fn ssim_full(img: &ImageF, gt: &ImageF, cfg: &LossConfig) -> Result<f64> {
    Ok(1.0 - losses::d_ssim_loss(img, gt, cfg)?)
}

/// A training or evaluation view.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: ImageF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub camera: String,
    pub l1: f64,
    /// D-SSIM loss in the first phase, P-SSIM loss afterwards.
    pub structural: f64,
    pub tv: f64,
    pub total: f64,
    pub gaussians: usize,
    /// True when the update was skipped because of non-finite gradients.
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sh_variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            write_record(&mut out, r)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }
}

pub fn write_record(out: &mut impl Write, r: &TrainRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, r)?;
    out.write_all(b"\n").map_err(|e| Error::io("<train log>", e))
}

/// Camera index for a 1-based iteration: every epoch visits each view once,
/// in an order shuffled by `(seed, epoch)`.
pub fn camera_for_iteration(seed: u64, iteration: u64, n_views: usize) -> usize {
    let n = n_views as u64;
    let epoch = (iteration - 1) / n;
    let mut order: Vec<usize> = (0..n_views).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(losses::patch_seed(seed, epoch));
    order.shuffle(&mut rng);
    order[((iteration - 1) % n) as usize]
}

/// Stepwise trainer. Iterations are 1-based; [`Trainer::step`] runs the next
/// one. State can be saved and restored through the public fields.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub views: &'a [View],
    pub set: GaussianSet,
    pub optimizer: OptimizerState,
    /// Number of completed iterations.
    pub iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(set: GaussianSet, views: &'a [View], cfg: TrainConfig) -> Result<Self> {
        let optimizer = OptimizerState::new(&set);
        Self::resume(set, optimizer, 0, views, cfg)
    }

    pub fn resume(
        set: GaussianSet,
        optimizer: OptimizerState,
        iteration: u64,
        views: &'a [View],
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if views.is_empty() {
            return Err(Error::invalid("training needs at least one view"));
        }
        for v in views {
            if v.image.channels() != 3
                || v.image.height() != v.camera.height
                || v.image.width() != v.camera.width
            {
                return Err(Error::ShapeMismatch(format!(
                    "view {}: image {}x{}x{} vs camera {}x{}",
                    v.name,
                    v.image.height(),
                    v.image.width(),
                    v.image.channels(),
                    v.camera.height,
                    v.camera.width
                )));
            }
        }
        if set.is_empty() {
            return Err(Error::invalid("cannot train an empty scene"));
        }
        if !optimizer.is_congruent(&set) {
            return Err(Error::ShapeMismatch("optimizer state does not match the scene".into()));
        }
        Ok(Self {
            cfg,
            views,
            set,
            optimizer,
            iteration,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let it = self.iteration + 1;
        let view = &self.views[camera_for_iteration(self.cfg.seed, it, self.views.len())];
        let img = raster::render(&self.set, &view.camera, &self.cfg.raster)?;
        let (total, phase, terms, d_img) =
            losses::total_loss_with_grad(it, &img, &view.image, &self.cfg.loss)?;
        let d_img = ImageF::from_vec(img.height(), img.width(), img.channels(), d_img)?;
        let grads = raster::render_backward(&self.set, &view.camera, &self.cfg.raster, &d_img)?;
        let applied = adam_step(
            &mut self.set,
            &grads,
            &mut self.optimizer,
            &self.cfg.learning_rates,
            &self.cfg.adam,
        )?;

        let mut pruned = None;
        if self.cfg.prune_every > 0 && it % self.cfg.prune_every == 0 {
            let keep = scene::prune_mask(&self.set, self.cfg.prune_threshold);
            let removed = keep.iter().filter(|k| !**k).count();
            if removed > 0 {
                self.set = scene::prune(&self.set, self.cfg.prune_threshold)?;
                self.optimizer.retain(&keep);
            }
            pruned = Some(removed);
        }

        let mut record = TrainRecord {
            iteration: it,
            phase,
            camera: view.name.clone(),
            l1: terms.l1,
            structural: terms.structural,
            tv: terms.tv,
            total,
            gaussians: self.set.len(),
            skipped: !applied,
            pruned,
            psnr: None,
            sh_variance: None,
        };
        if self.cfg.eval_every > 0 && (it % self.cfg.eval_every == 0 || it == self.cfg.iterations) {
            record.psnr = Some(
                self.views
                    .iter()
                    .map(|v| psnr_capped(&raster::render(&self.set, &v.camera, &self.cfg.raster)?, &v.image))
                    .collect::<Result<_>>()?,
            );
            record.sh_variance = Some(scene::sh_variance_report(&self.set)?);
        }
        self.iteration = it;
        Ok(record)
    }
}

pub struct TrainOutcome {
    pub set: GaussianSet,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
}

/// Runs `cfg.iterations` iterations from a fresh optimizer state.
pub fn train(set: GaussianSet, views: &[View], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(set, views, cfg.clone())?;
    let mut log = TrainLog::default();
    while !trainer.is_done() {
        log.records.push(trainer.step()?);
    }
    Ok(TrainOutcome {
        set: trainer.set,
        optimizer: trainer.optimizer,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sr_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sr_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

/// Super-resolution scoring inputs: the model and, per view, an optional
/// full-resolution ground truth.
pub struct SuperResolution<'a> {
    pub model: &'a MsrnModel,
    pub full_res: &'a [Option<ImageF>],
}

/// PSNR (capped) and SSIM per view plus their arithmetic means. With a
/// super-resolution model every render is also upscaled and scored against
/// the matching full-resolution ground truth.
pub fn evaluate(
    set: &GaussianSet,
    views: &[View],
    cfg: &TrainConfig,
    sr: Option<SuperResolution<'_>>,
) -> Result<MetricsTable> {
    if views.is_empty() {
        return Err(Error::invalid("evaluation needs at least one view"));
    }
    if let Some(sr) = &sr {
        if sr.full_res.len() != views.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} full-resolution images for {} views",
                sr.full_res.len(),
                views.len()
            )));
        }
    }
    let mut rows = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let img = raster::render(set, &v.camera, &cfg.raster)?;
        let mut row = MetricsRow {
            name: v.name.clone(),
            psnr: psnr_capped(&img, &v.image)?,
            ssim: ssim_full(&img, &v.image, &cfg.loss)?,
            sr_psnr: None,
            sr_ssim: None,
        };
        if let Some(sr) = &sr {
            let gt = sr.full_res[k]
                .as_ref()
                .ok_or_else(|| Error::MissingGroundTruth(v.name.clone()))?;
            let up = msrn::msrn_forward(&img, sr.model)?;
            row.sr_psnr = Some(psnr_capped(&up, gt)?);
            row.sr_ssim = Some(ssim_full(&up, gt, &cfg.loss)?);
        }
        rows.push(row);
    }
    let n = rows.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let has_sr = sr.is_some();
    let mean = MetricsRow {
        name: "mean".into(),
        psnr: mean_of(&|r| r.psnr),
        ssim: mean_of(&|r| r.ssim),
        sr_psnr: has_sr.then(|| mean_of(&|r| r.sr_psnr.unwrap_or(0.0))),
        sr_ssim: has_sr.then(|| mean_of(&|r| r.sr_ssim.unwrap_or(0.0))),
    };
    Ok(MetricsTable { rows, mean })
}
