//! Binary checkpoints.
//!
//! Layout (little-endian): `"SGS1"` | u32 version | u64 iteration |
//! u32 Gaussian count | u32 max degree | u32 per-Gaussian SH degrees |
//! f32 positions, log-scales, rotations, opacity logits, SH coefficients |
//! u64 optimizer step | f32 first moments | f32 second moments |
//! u32 config length + config JSON | CRC32 of everything before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::binary::{Reader, Writer};
use crate::scene::{Gaussian3D, GaussianSet, ShBank};
use crate::sh::coeff_count;
use crate::trainer::{param_count, OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGS1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub set: GaussianSet,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Freshly initialised scene with zero optimizer state.
    pub fn initial(set: GaussianSet, config: TrainConfig) -> Self {
        Self {
            iteration: 0,
            optimizer: OptimizerState::new(&set),
            set,
            config,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.optimizer.is_congruent(&self.set) {
            return Err(Error::ShapeMismatch("optimizer state does not match the scene".into()));
        }
        let gs = &self.set.gaussians;
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.iteration);
        w.len_u32(gs.len())?;
        w.len_u32(self.set.max_degree)?;
        for g in gs {
            w.len_u32(g.sh.degree())?;
        }
        let field = |f: &dyn Fn(&Gaussian3D) -> Vec<f32>| gs.iter().flat_map(f).collect::<Vec<f32>>();
        w.f32s(&field(&|g| g.position.to_vec()));
        w.f32s(&field(&|g| g.log_scale.to_vec()));
        w.f32s(&field(&|g| g.rotation.to_vec()));
        w.f32s(&field(&|g| vec![g.opacity_logit]));
        w.f32s(&field(&|g| g.sh.coeffs().iter().flatten().copied().collect()));
        w.u64(self.optimizer.step);
        w.f32s(&self.optimizer.first.concat());
        w.f32s(&self.optimizer.second.concat());
        let config = serde_json::to_vec(&self.config)?;
        w.len_u32(config.len())?;
        w.bytes(&config);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "checkpoint",
                version,
            });
        }
        let iteration = r.u64()?;
        let n = r.u32()? as usize;
        let max_degree = r.u32()? as usize;
        let degrees = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if let Some(d) = degrees.iter().find(|&&d| d > max_degree) {
            return Err(Error::Malformed(format!("SH degree {d} above max {max_degree}")));
        }
        let n_coeffs: usize = degrees.iter().map(|&d| coeff_count(d)).sum();
        let positions = r.f32s(3 * n)?;
        let log_scales = r.f32s(3 * n)?;
        let rotations = r.f32s(4 * n)?;
        let opacities = r.f32s(n)?;
        let sh = r.f32s(3 * n_coeffs)?;
        let step = r.u64()?;
        let n_params: usize = degrees.iter().map(|&d| 11 + 3 * coeff_count(d)).sum();
        let first = r.f32s(n_params)?;
        let second = r.f32s(n_params)?;
        let config_len = r.u32()? as usize;
        let config_bytes = r.take(config_len)?;
        r.verify("checkpoint")?;

        let mut gaussians = Vec::with_capacity(n);
        let mut sh_at = 0;
        for (i, &d) in degrees.iter().enumerate() {
            let k = coeff_count(d);
            let coeffs = sh[3 * sh_at..3 * (sh_at + k)]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            sh_at += k;
            gaussians.push(Gaussian3D {
                position: positions[3 * i..3 * i + 3].try_into().unwrap(),
                log_scale: log_scales[3 * i..3 * i + 3].try_into().unwrap(),
                rotation: rotations[4 * i..4 * i + 4].try_into().unwrap(),
                opacity_logit: opacities[i],
                sh: ShBank::from_coeffs(d, coeffs)?,
            });
        }
        let set = GaussianSet::new(gaussians, max_degree)?;
        let split = |flat: Vec<f32>| {
            let mut at = 0;
            set.gaussians
                .iter()
                .map(|g| {
                    let len = param_count(g);
                    at += len;
                    flat[at - len..at].to_vec()
                })
                .collect::<Vec<_>>()
        };
        let optimizer = OptimizerState {
            step,
            first: split(first),
            second: split(second),
        };
        let config = serde_json::from_slice(config_bytes)?;
        Ok(Self {
            iteration,
            set,
            optimizer,
            config,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
