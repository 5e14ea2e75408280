//! End-to-end acceptance checks. Run with `--nocapture` to see one
//! PASS/FAIL line per criterion; the test fails if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::Matrix2;
use patchsplat::io::ply::write_ply_binary;
use patchsplat::io::Checkpoint;
use patchsplat::losses::{self, LossConfig, Phase, SsimParams};
use patchsplat::msrn::{self, msrb_forward, MsrbWeights, MsrnModel, Tensor3};
use patchsplat::raster::{self, RasterConfig, Splat2D};
use patchsplat::scene::{self, logit, GaussianSet};
use patchsplat::trainer::{self, LearningRates, TrainConfig, TrainOutcome, View};
use patchsplat::ImageF;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = RasterConfig::default();
    let loss_cfg = LossConfig::default();
    let cam = front_camera(16);
    let render = |s: &GaussianSet| raster::render(s, &cam, &cfg).unwrap();
    let (mut seed, mut accepted, mut rejected, mut checked) = (0u64, 0, 0, 0);
    while accepted < 20 {
        seed += 1;
        ensure(seed < 500, || format!("only {accepted} usable scenes in {seed} seeds"))?;
        let set = random_scene(100 + seed, 8);
        let img = render(&set);
        let gt = offset_target(&img, 0.05, 2000 + seed);
        if !stencils_are_smooth(&set, &render, &gt, 1e-3) {
            rejected += 1;
            continue;
        }
        accepted += 1;
        let (_, phase, _, d_img) = losses::total_loss_with_grad(1, &img, &gt, &loss_cfg).unwrap();
        ensure(phase == Phase::DSsim, || "iteration 1 is not in the first phase".into())?;
        let d_img = ImageF::from_vec(16, 16, 3, d_img).unwrap();
        let grads = raster::render_backward(&set, &cam, &cfg, &d_img).unwrap();
        let loss = |s: &GaussianSet| losses::total_loss_with_grad(1, &render(s), &gt, &loss_cfg).unwrap().0;
        let (bad, n) = gradient_check(&set, &grads, &loss, 1e-3, 1e-3, 1e-6);
        checked += n;
        ensure(bad.is_empty(), || format!("scene {seed}: {} of {n} mismatched, first {:?}", bad.len(), bad[0]))?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "20 scenes, {checked} parameters, {rejected} scenes rejected for kinks, {:.1?}",
        start.elapsed()
    ))
}

struct Refit {
    views: Vec<View>,
    start: GaussianSet,
    cfg: TrainConfig,
}

fn refit_setup() -> Refit {
    let gt = refit_ground_truth();
    let mut cfg = TrainConfig {
        iterations: 500,
        learning_rates: LearningRates::default().scaled(2.0),
        eval_every: 100,
        seed: 11,
        ..Default::default()
    };
    cfg.loss.k_switch = 200;
    cfg.loss.seed = 11;
    let views = ring_cameras(8, 64)
        .into_iter()
        .enumerate()
        .map(|(k, camera)| View {
            name: format!("{k:03}"),
            image: raster::render(&gt, &camera, &cfg.raster).unwrap(),
            camera,
        })
        .collect();
    Refit {
        views,
        start: perturb(&gt, 0.05, 0.1, 7),
        cfg,
    }
}

fn mean_psnr(set: &GaussianSet, views: &[View], cfg: &RasterConfig) -> f64 {
    let total: f64 = views
        .iter()
        .map(|v| trainer::psnr_capped(&raster::render(set, &v.camera, cfg).unwrap(), &v.image).unwrap())
        .sum();
    total / views.len() as f64
}

fn synthetic_refit(refit: &Refit, run: &TrainOutcome, elapsed: Duration) -> Outcome {
    let cfg = &refit.cfg;
    ensure(cfg.loss.lambda == 0.5 && cfg.loss.beta == 0.04 && cfg.loss.gamma == 0.02, || {
        "loss weights differ from 0.5 / 0.04 / 0.02".into()
    })?;
    let before = mean_psnr(&refit.start, &refit.views, &cfg.raster);
    let after = mean_psnr(&run.set, &refit.views, &cfg.raster);
    let records = &run.log.records;
    ensure(records.len() == 500, || format!("{} log records", records.len()))?;
    let first = records[0].total;
    let late = records[199..].iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    let detail = format!("PSNR {before:.2} -> {after:.2} dB, loss {first:.4} -> {late:.4}, {elapsed:.1?}");
    ensure(after >= before + 10.0, || format!("gain below 10 dB: {detail}"))?;
    ensure(after >= 30.0, || format!("final below 30 dB: {detail}"))?;
    ensure(late < first, || format!("loss did not drop: {detail}"))?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(detail)
}

fn patchsplat(args: &[&str], cwd: &Path) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_patchsplat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("patchsplat {args:?}: {}", String::from_utf8_lossy(&o.stderr))
    })?;
    Ok(o.stdout)
}

/// Three cubic lattices with spacings 1, 2 and 3, far apart. Every lattice
/// point has at least three axis neighbours at exactly its spacing, and the
/// spacing-1 lattice holds more than half the points, so median-normalised
/// neighbour distances are exactly 1, 2 and 3.
fn lattice_cloud() -> Vec<u8> {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (spacing, side, offset) in [(1.0f32, 4, 0.0f32), (2.0, 3, 1000.0), (3.0, 3, 2000.0)] {
        for i in 0..side {
            for j in 0..side {
                for k in 0..side {
                    positions.push([offset + spacing * i as f32, spacing * j as f32, spacing * k as f32]);
                    colors.push([rng.gen_range(40..=255), rng.gen_range(40..=255), rng.gen_range(40..=255)]);
                }
            }
        }
    }
    write_ply_binary(&positions, &colors)
}

fn sh_variance_pattern() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("cloud.ply"), lattice_cloud()).map_err(|e| e.to_string())?;
    let report = |mode: &str| -> Result<Vec<f64>, String> {
        let ckpt = format!("{mode}.ckpt");
        patchsplat(&["init", "cloud.ply", "-o", &ckpt, "--sh-mode", mode], d)?;
        let out = patchsplat(&["sh-variance", &ckpt, "--json"], d)?;
        serde_json::from_slice(&out).map_err(|e| e.to_string())
    };
    let standard = report("standard")?;
    let dynamic = report("dynamic")?;
    ensure(standard[1..=3].iter().all(|&v| v == 0.0), || format!("standard {standard:?}"))?;
    ensure(dynamic[1..=3].iter().all(|&v| v > 0.0), || format!("dynamic {dynamic:?}"))?;

    let ckpt = patchsplat::io::load_checkpoint(d.join("dynamic.ckpt")).map_err(|e| e.to_string())?;
    let mut degrees: Vec<usize> = ckpt.set.gaussians.iter().map(|g| g.sh.degree()).collect();
    degrees.sort_unstable();
    degrees.dedup();
    ensure(degrees == [1, 2, 3], || format!("assigned degrees {degrees:?}"))?;
    let fmt = |v: &[f64]| v[1..=3].iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");
    Ok(format!("standard [{}], dynamic [{}]", fmt(&standard), fmt(&dynamic)))
}

fn loss_identities() -> Outcome {
    let cfg = LossConfig::default();
    let params = SsimParams {
        kernel: cfg.kernel,
        stride: cfg.stride,
        c1: cfg.ssim_c1,
        c2: cfg.ssim_c2,
    };
    let mut worst_self: f64 = 0.0;
    for seed in 0..10 {
        let x = random_image(32, 24, seed);
        let pairs = losses::sample_stochastic_patches(seed, 32, 24, cfg.patches).map_err(|e| e.to_string())?;
        let v = losses::p_ssim(&x, &x, &pairs, &cfg).map_err(|e| e.to_string())?;
        worst_self = worst_self.max((v - 1.0).abs());
    }
    ensure(worst_self <= 1e-9, || format!("P-SSIM(x, x) off by {worst_self:e}"))?;

    let (a, b) = (random_image(32, 24, 50), random_image(32, 24, 51));
    let single = losses::identity_patches(32, 24, 1).map_err(|e| e.to_string())?;
    let p1 = losses::p_ssim(&a, &b, &single, &cfg).map_err(|e| e.to_string())?;
    let full = losses::ssim(&a, &b, params).map_err(|e| e.to_string())?;
    ensure((p1 - full).abs() <= 1e-9, || format!("P=1 {p1} vs full {full}"))?;

    let (m1, m2) = (0.3, 0.7);
    let closed = (2.0 * m1 * m2 + cfg.ssim_c1) / (m1 * m1 + m2 * m2 + cfg.ssim_c1);
    let c1 = ImageF::filled(16, 16, 3, m1).unwrap();
    let c2 = ImageF::filled(16, 16, 3, m2).unwrap();
    let windowed = losses::ssim(&c1, &c2, params).map_err(|e| e.to_string())?;
    let full_window = trainer::ssim_full(&c1, &c2, &cfg).map_err(|e| e.to_string())?;
    ensure((windowed - closed).abs() <= 1e-6 && (full_window - closed).abs() <= 1e-6, || {
        format!("constant SSIM {windowed} / {full_window} vs {closed}")
    })?;

    let tv_img = ImageF::from_vec(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let tv = losses::tv_loss(&tv_img);
    ensure(tv == 0.5, || format!("TV {tv}"))?;

    // 0.304 has no exact binary representation; the sum of the three
    // products lands one ulp above the nearest double
    let (total, phase) = losses::total_loss(1, 0.2, 0.4, 0.0, 0.1, &cfg);
    let ulps = (total.to_bits() as i64 - 0.304f64.to_bits() as i64).abs();
    ensure(phase == Phase::DSsim && ulps <= 1, || format!("total loss {total:?} ({ulps} ulp)"))?;

    Ok(format!(
        "P-SSIM(x,x) err {worst_self:.1e}, P=1 err {:.1e}, constant err {:.1e}, TV {tv}, total {total} ({ulps} ulp from 0.304)",
        (p1 - full).abs(),
        (windowed - closed).abs().max((full_window - closed).abs())
    ))
}

fn blending_conservation() -> Outcome {
    let cfg = RasterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let mut splats: Vec<Splat2D> = (0..n)
            .map(|k| {
                let (sx, sy): (f64, f64) = (rng.gen_range(0.5..6.0), rng.gen_range(0.5..6.0));
                let cov = rng.gen_range(-0.8..0.8) * (sx * sy).sqrt();
                Splat2D {
                    mean2d: [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)],
                    cov2d: Matrix2::new(sx, cov, cov, sy),
                    depth: rng.gen_range(0.1..10.0),
                    color: rng.gen(),
                    alpha: rng.gen_range(0.0..raster::MAX_ALPHA),
                    source_index: k,
                }
            })
            .collect();
        let order = raster::sort_by_depth(&splats);
        splats = order.into_iter().map(|i| splats[i].clone()).collect();
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let (w, t) = raster::blend_weights(&splats, x, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((w.iter().sum::<f64>() + t - 1.0).abs());
    }
    ensure(worst <= 1e-6, || format!("weights + T off by {worst:e}"))?;

    let cfg = RasterConfig {
        background: [0.2, 0.4, 0.6],
        ..Default::default()
    };
    let (c1, c2) = ([1.0, 0.0, 0.5], [0.0, 1.0, 0.25]);
    let half = |depth, color| Splat2D {
        mean2d: [1.5, 2.5],
        cov2d: Matrix2::identity(),
        depth,
        color,
        alpha: 0.5,
        source_index: 0,
    };
    let px = raster::alpha_blend_pixel(&[half(1.0, c1), half(2.0, c2)], [1.5, 2.5], &cfg).map_err(|e| e.to_string())?;
    let err = (0..3)
        .map(|ch| (px[ch] - (0.5 * c1[ch] + 0.25 * c2[ch] + 0.25 * cfg.background[ch])).abs())
        .fold(0.0, f64::max);
    ensure(err <= 1e-7, || format!("two-splat pixel {px:?}, error {err:e}"))?;
    Ok(format!("100 configurations, worst error {worst:.1e}; two-splat error {err:.1e}"))
}

fn msrn_contracts() -> Outcome {
    let start = Instant::now();
    let e = |e: patchsplat::Error| e.to_string();

    let x = Tensor3::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).map_err(e)?;
    let y = msrn::pixel_shuffle(&x, 2).map_err(e)?;
    ensure((y.channels(), y.height(), y.width()) == (1, 2, 2) && y.data() == [1.0, 2.0, 3.0, 4.0], || {
        format!("pixel_shuffle gave {y:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Tensor3::from_vec(8, 5, 6, (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(e)?;
    let out = msrb_forward(&m, &MsrbWeights::zeros(8).map_err(e)?).map_err(e)?;
    ensure(out == m, || "zero-weight block changed its input".into())?;

    let model = MsrnModel::fixture(2, 2, 8, 21).map_err(e)?;
    let lr = random_image(12, 10, 4);
    let sr = msrn::msrn_forward(&lr, &model).map_err(e)?;
    ensure((sr.height(), sr.width(), sr.channels()) == (24, 20, 3), || {
        format!("output shape {}x{}x{}", sr.height(), sr.width(), sr.channels())
    })?;
    ensure(sr.data().iter().all(|v| (0.0..=1.0).contains(v)), || "output outside [0, 1]".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("fixture.msrn");
    msrn::save_weights(&model, &path).map_err(e)?;
    let back = msrn::load_weights(&path).map_err(e)?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(back == model && back.to_bytes().map_err(e)? == bytes, || "weight round trip not bit-exact".into())?;
    let mut corrupt = bytes.clone();
    let at = corrupt.len() - 8;
    corrupt[at] ^= 0x01;
    ensure(matches!(MsrnModel::from_bytes(&corrupt), Err(patchsplat::Error::CrcMismatch { .. })), || {
        "flipped byte not caught by CRC".into()
    })?;

    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("shuffle, identity, 12x10 -> 24x20, {} byte round trip, {:.1?}", bytes.len(), start.elapsed()))
}

fn schedule_and_pruning() -> Outcome {
    for k in [1u64, 200, 25_000] {
        let (at, after) = (Phase::for_iteration(k, k), Phase::for_iteration(k + 1, k));
        ensure(at == Phase::DSsim && after == Phase::PSsim, || format!("k_switch {k}: {at:?} then {after:?}"))?;
    }
    // the same through the trainer's log tags
    let mut cfg = TrainConfig {
        iterations: 6,
        eval_every: 0,
        prune_every: 0,
        ..Default::default()
    };
    cfg.loss.k_switch = 3;
    cfg.loss.patches = 2;
    let set = random_scene(4, 4);
    let cam = front_camera(16);
    let views = [View {
        name: "front".into(),
        image: random_image(16, 16, 8),
        camera: cam,
    }];
    let run = trainer::train(set, &views, &cfg).map_err(|e| e.to_string())?;
    let tags: Vec<&str> = run.log.records.iter().map(|r| r.phase.tag()).collect();
    let expected: Vec<&str> = [Phase::DSsim, Phase::DSsim, Phase::DSsim, Phase::PSsim, Phase::PSsim, Phase::PSsim]
        .iter()
        .map(|p| p.tag())
        .collect();
    ensure(tags == expected, || format!("log phases {tags:?}"))?;

    let opacities = [0.001, 0.0049, 0.0051, 0.2, 0.9, 0.004, 0.05, 0.0001];
    let template = random_scene(17, 1).gaussians[0].clone();
    let gaussians = opacities
        .iter()
        .enumerate()
        .map(|(k, &o)| {
            let mut g = template.clone();
            g.position[0] += k as f32 * 0.1;
            g.opacity_logit = logit(o) as f32;
            g
        })
        .collect();
    let set = GaussianSet::new(gaussians, 3).map_err(|e| e.to_string())?;
    let threshold = 0.005;
    let once = scene::prune(&set, threshold).map_err(|e| e.to_string())?;
    let survivors: Vec<_> = set.gaussians.iter().filter(|g| g.opacity() >= threshold).cloned().collect();
    ensure(once.gaussians == survivors, || {
        format!("kept {} of {}, expected {}", once.len(), set.len(), survivors.len())
    })?;
    ensure(once.gaussians.iter().all(|g| g.opacity() >= threshold), || "a survivor is below threshold".into())?;
    let twice = scene::prune(&once, threshold).map_err(|e| e.to_string())?;
    ensure(twice == once, || "second prune changed the scene".into())?;
    Ok(format!(
        "phase flips at k+1 for k in 1, 200, 25000; pruned {} of {}, idempotent",
        set.len() - once.len(),
        set.len()
    ))
}

fn run_bytes(refit: &Refit, run: &TrainOutcome) -> Result<(String, Vec<u8>), String> {
    let log = run.log.to_jsonl().map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        iteration: refit.cfg.iterations,
        set: run.set.clone(),
        optimizer: run.optimizer.clone(),
        config: refit.cfg.clone(),
    };
    Ok((log, ckpt.to_bytes().map_err(|e| e.to_string())?))
}

fn determinism(refit: &Refit, first: &TrainOutcome) -> Outcome {
    let second = trainer::train(refit.start.clone(), &refit.views, &refit.cfg).map_err(|e| e.to_string())?;
    let (log_a, ckpt_a) = run_bytes(refit, first)?;
    let (log_b, ckpt_b) = run_bytes(refit, &second)?;
    ensure(log_a == log_b, || "training logs differ".into())?;
    ensure(ckpt_a == ckpt_b, || "checkpoints differ".into())?;
    Ok(format!("{} log bytes and {} checkpoint bytes identical", log_a.len(), ckpt_a.len()))
}

#[test]
fn acceptance_criteria() {
    let refit = refit_setup();
    let start = Instant::now();
    let run = trainer::train(refit.start.clone(), &refit.views, &refit.cfg).unwrap();
    let refit_time = start.elapsed();

    let results: Vec<(&str, Outcome)> = vec![
        ("1 gradient oracle", gradient_oracle()),
        ("2 synthetic refit", synthetic_refit(&refit, &run, refit_time)),
        ("3 SH variance pattern", sh_variance_pattern()),
        ("4 loss identities", loss_identities()),
        ("5 blending conservation", blending_conservation()),
        ("6 super-resolution network contracts", msrn_contracts()),
        ("7 schedule and pruning", schedule_and_pruning()),
        ("8 determinism", determinism(&refit, &run)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
