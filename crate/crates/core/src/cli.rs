//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::io::{self, Checkpoint};
use crate::msrn;
use crate::raster;
use crate::scene::{self, ShInitMode};
use crate::trainer::{self, SuperResolution, TrainConfig, Trainer, View};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "patchsplat", version, about = "CPU Gaussian splatting toolkit")]
pub struct Cli {
    /// Overrides the training and patch-sampling seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML (by extension) or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShModeArg {
    Standard,
    Dynamic,
}

impl From<ShModeArg> for ShInitMode {
    fn from(m: ShModeArg) -> Self {
        match m {
            ShModeArg::Standard => ShInitMode::Standard,
            ShModeArg::Dynamic => ShInitMode::Dynamic,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialise a checkpoint from a PLY point cloud.
    Init {
        ply: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "dynamic")]
        sh_mode: ShModeArg,
    },
    /// Train a checkpoint against the images of a camera rig.
    Train {
        checkpoint: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Line-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Render one camera of a rig to PNG.
    Render {
        checkpoint: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        camera_id: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Upscale a PNG with a super-resolution weight file.
    Superres {
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// PSNR and SSIM of two PNGs, or of a checkpoint against a rig.
    Metrics {
        images: Vec<PathBuf>,
        #[arg(long, conflicts_with = "images", requires = "cameras")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Super-resolution weights; renders are upscaled and scored against
        /// the images of `--full-res-cameras`.
        #[arg(long, requires_all = ["checkpoint", "full_res_cameras"])]
        weights: Option<PathBuf>,
        #[arg(long)]
        full_res_cameras: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Per-degree variance of SH coefficients.
    ShVariance {
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn base_config(cli: &Cli, stored: Option<&TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, stored) {
        (Some(path), _) => io::load_config(path)?,
        (None, Some(c)) => c.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.loss.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_views(path: &Path) -> Result<Vec<View>> {
    io::load_cameras(path)?
        .into_iter()
        .map(|c| {
            Ok(View {
                name: c.id.to_string(),
                image: io::load_image(&c.image)?,
                camera: c.camera,
            })
        })
        .collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Init { ply, output, sh_mode } => {
            let cfg = base_config(cli, None)?;
            let cloud = io::load_ply(ply)?;
            let set = scene::init_scene(&cloud, &cfg.sh_init, (*sh_mode).into())?;
            let n = set.len();
            io::save_checkpoint(&Checkpoint::initial(set, cfg), output)?;
            writeln!(out, "initialised {n} Gaussians").map_err(io_err(output))?;
        }
        Command::Train {
            checkpoint,
            cameras,
            output,
            log,
            iterations,
        } => {
            let ckpt = io::load_checkpoint(checkpoint)?;
            let mut cfg = base_config(cli, Some(&ckpt.config))?;
            if let Some(n) = iterations {
                cfg.iterations = *n;
                cfg.validate()?;
            }
            let views = load_views(cameras)?;
            let mut log_file = match log {
                Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
                None => None,
            };
            let mut trainer = Trainer::resume(ckpt.set, ckpt.optimizer, ckpt.iteration, &views, cfg.clone())?;
            while !trainer.is_done() {
                let record = trainer.step()?;
                if let Some(f) = log_file.as_mut() {
                    trainer::write_record(f, &record)?;
                }
                if cfg.checkpoint_every > 0 && trainer.iteration % cfg.checkpoint_every == 0 {
                    let path = periodic_path(output, trainer.iteration);
                    io::save_checkpoint(&snapshot(&trainer), &path)?;
                }
            }
            if let (Some(f), Some(p)) = (log_file.as_mut(), log) {
                f.flush().map_err(io_err(p))?;
            }
            io::save_checkpoint(&snapshot(&trainer), output)?;
            writeln!(
                out,
                "trained to iteration {} with {} Gaussians",
                trainer.iteration,
                trainer.set.len()
            )
            .map_err(io_err(output))?;
        }
        Command::Render {
            checkpoint,
            cameras,
            camera_id,
            output,
        } => {
            let ckpt = io::load_checkpoint(checkpoint)?;
            let cfg = base_config(cli, Some(&ckpt.config))?;
            let cam = io::load_cameras(cameras)?
                .into_iter()
                .find(|c| c.id.to_string() == *camera_id)
                .ok_or_else(|| Error::invalid(format!("no camera with id {camera_id}")))?;
            let img = raster::render(&ckpt.set, &cam.camera, &cfg.raster)?;
            io::save_image(&img, output)?;
        }
        Command::Superres {
            input,
            weights,
            output,
        } => {
            let model = msrn::load_weights(weights)?;
            let img = io::load_image(input)?;
            io::save_image(&msrn::msrn_forward(&img, &model)?, output)?;
        }
        Command::Metrics {
            images,
            checkpoint,
            cameras,
            weights,
            full_res_cameras,
            json,
        } => {
            let table = match (checkpoint, cameras) {
                (Some(ckpt), Some(cams)) => {
                    let ckpt = io::load_checkpoint(ckpt)?;
                    let cfg = base_config(cli, Some(&ckpt.config))?;
                    let views = load_views(cams)?;
                    let model = weights.as_ref().map(msrn::load_weights).transpose()?;
                    let full = match full_res_cameras {
                        Some(p) => load_views(p)?.into_iter().map(|v| Some(v.image)).collect(),
                        None => Vec::new(),
                    };
                    let sr = model.as_ref().map(|m| SuperResolution {
                        model: m,
                        full_res: &full,
                    });
                    trainer::evaluate(&ckpt.set, &views, &cfg, sr)?
                }
                _ => {
                    let [a, b] = images.as_slice() else {
                        return Err(Error::invalid(
                            "metrics needs two images or --checkpoint with --cameras",
                        ));
                    };
                    let cfg = base_config(cli, None)?;
                    let (a, b) = (io::load_image(a)?, io::load_image(b)?);
                    let row = trainer::MetricsRow {
                        name: "image".into(),
                        psnr: trainer::psnr_capped(&a, &b)?,
                        ssim: trainer::ssim_full(&a, &b, &cfg.loss)?,
                        sr_psnr: None,
                        sr_ssim: None,
                    };
                    trainer::MetricsTable {
                        rows: vec![row.clone()],
                        mean: trainer::MetricsRow {
                            name: "mean".into(),
                            ..row
                        },
                    }
                }
            };
            write_metrics(out, &table, *json)?;
        }
        Command::ShVariance { checkpoint, json } => {
            let ckpt = io::load_checkpoint(checkpoint)?;
            let report = scene::sh_variance_report(&ckpt.set)?;
            if *json {
                serde_json::to_writer(&mut *out, &report)?;
                writeln!(out).map_err(io_err(checkpoint))?;
            } else {
                writeln!(out, "degree\tvariance").map_err(io_err(checkpoint))?;
                for (d, v) in report.iter().enumerate() {
                    writeln!(out, "{d}\t{v:e}").map_err(io_err(checkpoint))?;
                }
            }
        }
    }
    Ok(())
}

fn snapshot(t: &Trainer<'_>) -> Checkpoint {
    Checkpoint {
        iteration: t.iteration,
        set: t.set.clone(),
        optimizer: t.optimizer.clone(),
        config: t.cfg.clone(),
    }
}

/// `out.ckpt` → `out_000100.ckpt`.
fn periodic_path(output: &Path, iteration: u64) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match output.extension() {
        Some(ext) => format!("{stem}_{iteration:06}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{iteration:06}"),
    };
    output.with_file_name(name)
}

fn write_metrics(out: &mut dyn Write, table: &trainer::MetricsTable, json: bool) -> Result<()> {
    let w = |e| Error::io("<stdout>", e);
    if json {
        serde_json::to_writer(&mut *out, table)?;
        return writeln!(out).map_err(w);
    }
    let sr = table.mean.sr_psnr.is_some();
    write!(out, "view\tpsnr\tssim").map_err(w)?;
    if sr {
        write!(out, "\tsr_psnr\tsr_ssim").map_err(w)?;
    }
    writeln!(out).map_err(w)?;
    for r in table.rows.iter().chain(std::iter::once(&table.mean)) {
        write!(out, "{}\t{:.4}\t{:.6}", r.name, r.psnr, r.ssim).map_err(w)?;
        if let (Some(p), Some(s)) = (r.sr_psnr, r.sr_ssim) {
            write!(out, "\t{p:.4}\t{s:.6}").map_err(w)?;
        }
        writeln!(out).map_err(w)?;
    }
    Ok(())
}
