//! Inference-only multi-scale residual super-resolution network.
//!
//! Layout: a 3×3 head conv lifts the low-resolution image to `F` feature
//! channels, `K` multi-scale residual blocks refine it, a 1×1 fusion conv
//! combines the head output with every block output, and the tail convs map
//! to `3·r²` channels that a pixel shuffle rearranges into the upscaled
//! image. No interpolation happens before the head.
//!
//! Weights are stored and evaluated in single precision.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::io::binary::{Reader, Writer};

pub const WEIGHTS_MAGIC: &[u8; 6] = b"MSRNW1";
pub const WEIGHTS_VERSION: u32 = 1;
pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_FEATURES: usize = 64;

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_vec(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite tensor value"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Planar copy of an interleaved image.
    pub fn from_image(img: &ImageF) -> Self {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut data = vec![0.0f32; c * h * w];
        for (p, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                data[ch * h * w + p] = *v as f32;
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_image(&self) -> Result<ImageF> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f64; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = self.data[ch * h * w + p] as f64;
            }
        }
        ImageF::from_vec(h, w, c, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks tensors along the channel axis.
    pub fn concat(parts: &[&Tensor3]) -> Result<Tensor3> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero tensors"))?;
        let (h, w) = (first.height, first.width);
        if let Some(bad) = parts.iter().find(|t| t.height != h || t.width != w) {
            return Err(Error::ShapeMismatch(format!(
                "concatenating {}x{} with {h}x{w}",
                bad.height, bad.width
            )));
        }
        let channels = parts.iter().map(|t| t.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor3 {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    fn add(&self, other: &Tensor3) -> Tensor3 {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor3 {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `out × in × k × k`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        let layer = Self {
            out_channels,
            in_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        };
        layer.validate()?;
        Ok(layer)
    }

    /// He-style random initialisation scaled down by `gain`.
    fn random(out: usize, inp: usize, k: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let std = gain * (2.0 / (inp * k * k) as f32).sqrt();
        Self {
            out_channels: out,
            in_channels: inp,
            kernel: k,
            weights: (0..out * inp * k * k)
                .map(|_| rng.gen_range(-1.0f32..1.0) * std * 3f32.sqrt())
                .collect(),
            bias: (0..out).map(|_| rng.gen_range(-0.01f32..0.01)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("conv layer needs at least one channel"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel {} must be odd", self.kernel)));
        }
        let expected = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weights.len() != expected || self.bias.len() != self.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv {}x{}x{k}x{k} has {} weights and {} biases",
                self.out_channels,
                self.in_channels,
                self.weights.len(),
                self.bias.len(),
                k = self.kernel
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite conv weight"));
        }
        Ok(())
    }

    fn weight(&self, o: usize, i: usize) -> &[f32] {
        let kk = self.kernel * self.kernel;
        let start = (o * self.in_channels + i) * kk;
        &self.weights[start..start + kk]
    }
}

/// Same-size convolution with zero padding `(k-1)/2`, plus bias.
pub fn conv2d(x: &Tensor3, layer: &ConvLayer) -> Result<Tensor3> {
    if x.channels != layer.in_channels {
        return Err(Error::ChannelMismatch {
            expected: layer.in_channels,
            got: x.channels,
        });
    }
    let (h, w, k) = (x.height, x.width, layer.kernel);
    let pad = (k / 2) as isize;
    let mut data = vec![0.0f32; layer.out_channels * h * w];
    data.par_chunks_mut(h * w).enumerate().for_each(|(o, out)| {
        out.fill(layer.bias[o]);
        for i in 0..layer.in_channels {
            let src = x.plane(i);
            let kern = layer.weight(o, i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src_row = &src[sy * w..(sy + 1) * w];
                        let dst_row = &mut out[y * w..(y + 1) * w];
                        for xx in x0..x1 {
                            dst_row[xx] += wv * src_row[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor3 {
        channels: layer.out_channels,
        height: h,
        width: w,
        data,
    })
}

/// Output indices `t` in `[0, n)` whose source `t + d` is also in range.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    Tensor3 {
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        ..*x
    }
}

/// Weights of one multi-scale residual block: parallel 3×3 and 5×5 paths,
/// a second stage over their cross-concatenation, and a 1×1 fusion back to
/// `F` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MsrbWeights {
    pub conv3_1: ConvLayer,
    pub conv5_1: ConvLayer,
    pub conv3_2: ConvLayer,
    pub conv5_2: ConvLayer,
    pub fusion: ConvLayer,
}

impl MsrbWeights {
    pub fn zeros(features: usize) -> Result<Self> {
        let f = features;
        Ok(Self {
            conv3_1: ConvLayer::zeros(f, f, 3)?,
            conv5_1: ConvLayer::zeros(f, f, 5)?,
            conv3_2: ConvLayer::zeros(2 * f, 2 * f, 3)?,
            conv5_2: ConvLayer::zeros(2 * f, 2 * f, 5)?,
            fusion: ConvLayer::zeros(f, 4 * f, 1)?,
        })
    }

    fn layers(&self) -> [(&'static str, &ConvLayer); 5] {
        [
            ("conv3_1", &self.conv3_1),
            ("conv5_1", &self.conv5_1),
            ("conv3_2", &self.conv3_2),
            ("conv5_2", &self.conv5_2),
            ("fusion", &self.fusion),
        ]
    }

    fn validate(&self, f: usize) -> Result<()> {
        let expect = [(f, f, 3), (f, f, 5), (2 * f, 2 * f, 3), (2 * f, 2 * f, 5), (f, 4 * f, 1)];
        for ((name, layer), (o, i, k)) in self.layers().into_iter().zip(expect) {
            layer.validate()?;
            if (layer.out_channels, layer.in_channels, layer.kernel) != (o, i, k) {
                return Err(Error::ShapeMismatch(format!(
                    "block {name} is {}x{}x{}, expected {o}x{i}x{k}",
                    layer.out_channels, layer.in_channels, layer.kernel
                )));
            }
        }
        Ok(())
    }
}

/// Returns `S + m_prev` where `S` is the fused multi-scale residual.
pub fn msrb_forward(m_prev: &Tensor3, block: &MsrbWeights) -> Result<Tensor3> {
    let s1 = relu(&conv2d(m_prev, &block.conv3_1)?);
    let p1 = relu(&conv2d(m_prev, &block.conv5_1)?);
    let cat1 = Tensor3::concat(&[&s1, &p1])?;
    let s2 = relu(&conv2d(&cat1, &block.conv3_2)?);
    let p2 = relu(&conv2d(&cat1, &block.conv5_2)?);
    let cat2 = Tensor3::concat(&[&s2, &p2])?;
    let s = conv2d(&cat2, &block.fusion)?;
    Ok(s.add(m_prev))
}

/// 1×1 fusion over the channel concatenation of all feature maps.
pub fn hffs(outputs: &[Tensor3], layer: &ConvLayer) -> Result<Tensor3> {
    let refs: Vec<&Tensor3> = outputs.iter().collect();
    let cat = Tensor3::concat(&refs)?;
    if layer.kernel != 1 {
        return Err(Error::invalid(format!("fusion kernel must be 1, got {}", layer.kernel)));
    }
    conv2d(&cat, layer)
}

/// `out[c][i][j] = x[c·r² + (i mod r)·r + (j mod r)][i / r][j / r]`.
pub fn pixel_shuffle(x: &Tensor3, r: usize) -> Result<Tensor3> {
    let rr = shuffle_factor(x.channels, r)?;
    let (c, h, w) = (x.channels / rr, x.height * r, x.width * r);
    let mut data = vec![0.0f32; c * h * w];
    for oc in 0..c {
        for i in 0..h {
            for j in 0..w {
                let src = oc * rr + (i % r) * r + (j % r);
                data[(oc * h + i) * w + j] = x.get(src, i / r, j / r);
            }
        }
    }
    Ok(Tensor3 {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor3, r: usize) -> Result<Tensor3> {
    if r == 0 || x.height % r != 0 || x.width % r != 0 {
        return Err(Error::invalid(format!(
            "{}x{} is not divisible by {r}",
            x.height, x.width
        )));
    }
    let (h, w) = (x.height / r, x.width / r);
    let c = x.channels * r * r;
    let mut data = vec![0.0f32; c * h * w];
    for oc in 0..x.channels {
        for i in 0..x.height {
            for j in 0..x.width {
                let dst = oc * r * r + (i % r) * r + (j % r);
                data[(dst * h + i / r) * w + j / r] = x.get(oc, i, j);
            }
        }
    }
    Ok(Tensor3 {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

fn shuffle_factor(channels: usize, r: usize) -> Result<usize> {
    if r == 0 {
        return Err(Error::invalid("scale factor must be at least 1"));
    }
    let rr = r * r;
    if channels % rr != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{channels} channels not divisible by r² = {rr}"
        )));
    }
    Ok(rr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrnModel {
    pub scale_factor: usize,
    pub feature_width: usize,
    pub head: ConvLayer,
    pub blocks: Vec<MsrbWeights>,
    pub hffs: ConvLayer,
    /// Convs between fusion and the pixel shuffle; the last one outputs
    /// `3·r²` channels.
    pub tail: Vec<ConvLayer>,
    /// Conv applied after the shuffle, producing the 3 output channels.
    pub output: ConvLayer,
}

impl MsrnModel {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Small randomly initialised model for tests and demos.
    pub fn fixture(scale_factor: usize, n_blocks: usize, feature_width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, r) = (feature_width, scale_factor);
        let gain = 0.5;
        let mut conv = |o, i, k| ConvLayer::random(o, i, k, gain, &mut rng);
        let head = conv(f, 3, 3);
        let blocks = (0..n_blocks)
            .map(|_| MsrbWeights {
                conv3_1: conv(f, f, 3),
                conv5_1: conv(f, f, 5),
                conv3_2: conv(2 * f, 2 * f, 3),
                conv5_2: conv(2 * f, 2 * f, 5),
                fusion: conv(f, 4 * f, 1),
            })
            .collect();
        let model = Self {
            scale_factor: r,
            feature_width: f,
            head,
            blocks,
            hffs: conv(f, (n_blocks + 1) * f, 1),
            tail: vec![conv(f, f, 3), conv(3 * r * r, f, 3)],
            output: conv(3, 3, 3),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, r) = (self.feature_width, self.scale_factor);
        if r == 0 || f == 0 {
            return Err(Error::invalid("scale factor and feature width must be positive"));
        }
        let check = |name: &str, l: &ConvLayer, o: Option<usize>, i: usize| -> Result<()> {
            l.validate()?;
            if l.in_channels != i || o.is_some_and(|o| o != l.out_channels) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}→{}, expected {i}→{}",
                    l.in_channels,
                    l.out_channels,
                    o.map_or("any".to_string(), |o| o.to_string())
                )));
            }
            Ok(())
        };
        check("head", &self.head, Some(f), 3)?;
        for b in &self.blocks {
            b.validate(f)?;
        }
        check("hffs", &self.hffs, Some(f), (self.blocks.len() + 1) * f)?;
        if self.hffs.kernel != 1 {
            return Err(Error::ShapeMismatch("hffs kernel must be 1".into()));
        }
        let mut ch = f;
        for (k, l) in self.tail.iter().enumerate() {
            check(&format!("tail.{k}"), l, None, ch)?;
            ch = l.out_channels;
        }
        if ch % (r * r) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "tail output {ch} not divisible by r² = {}",
                r * r
            )));
        }
        check("output", &self.output, Some(3), ch / (r * r))
    }

    /// Tensors in file order with their names.
    fn named_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![("head".to_string(), &self.head)];
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, l) in b.layers() {
                out.push((format!("blocks.{k}.{name}"), l));
            }
        }
        out.push(("hffs".into(), &self.hffs));
        for (k, l) in self.tail.iter().enumerate() {
            out.push((format!("tail.{k}"), l));
        }
        out.push(("output".into(), &self.output));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION);
        w.len_u32(self.scale_factor)?;
        w.len_u32(self.blocks.len())?;
        w.len_u32(self.feature_width)?;
        for (name, l) in self.named_layers() {
            write_tensor(
                &mut w,
                &format!("{name}.weight"),
                &[l.out_channels, l.in_channels, l.kernel, l.kernel],
                &l.weights,
            )?;
            write_tensor(&mut w, &format!("{name}.bias"), &[l.out_channels], &l.bias)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, WEIGHTS_MAGIC, "MSRN weights")?;
        let version = r.u32()?;
        let scale_factor = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        let feature_width = r.u32()? as usize;
        let mut tensors = TensorMap::new();
        while !r.is_empty() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("tensor {name} is too large")))?;
            let data = r.f32s(count)?;
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(Error::Malformed(format!("duplicate tensor {name}")));
            }
        }
        r.verify("MSRN weights")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "MSRN weights",
                version,
            });
        }

        let mut take = |name: &str| take_layer(&mut tensors, name);
        let head = take("head")?;
        let blocks = (0..n_blocks)
            .map(|k| {
                Ok(MsrbWeights {
                    conv3_1: take(&format!("blocks.{k}.conv3_1"))?,
                    conv5_1: take(&format!("blocks.{k}.conv5_1"))?,
                    conv3_2: take(&format!("blocks.{k}.conv3_2"))?,
                    conv5_2: take(&format!("blocks.{k}.conv5_2"))?,
                    fusion: take(&format!("blocks.{k}.fusion"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hffs = take("hffs")?;
        let output = take("output")?;
        let mut tail = Vec::new();
        while tensors.contains_key(&format!("tail.{}.weight", tail.len())) {
            tail.push(take_layer(&mut tensors, &format!("tail.{}", tail.len()))?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Malformed(format!("unexpected tensor {extra}")));
        }
        let model = Self {
            scale_factor,
            feature_width,
            head,
            blocks,
            hffs,
            tail,
            output,
        };
        model.validate()?;
        Ok(model)
    }
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn take_layer(tensors: &mut TensorMap, name: &str) -> Result<ConvLayer> {
    let (wd, weights) = tensors
        .remove(&format!("{name}.weight"))
        .ok_or_else(|| Error::MissingProperty(format!("{name}.weight")))?;
    let (bd, bias) = tensors
        .remove(&format!("{name}.bias"))
        .ok_or_else(|| Error::MissingProperty(format!("{name}.bias")))?;
    if wd.len() != 4 || wd[2] != wd[3] || bd != [wd[0]] {
        return Err(Error::ShapeMismatch(format!(
            "{name}: weight dims {wd:?}, bias dims {bd:?}"
        )));
    }
    Ok(ConvLayer {
        out_channels: wd[0],
        in_channels: wd[1],
        kernel: wd[2],
        weights,
        bias,
    })
}

fn write_tensor(w: &mut Writer, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    w.len_u32(name.len())?;
    w.bytes(name.as_bytes());
    w.len_u32(dims.len())?;
    for &d in dims {
        w.len_u32(d)?;
    }
    w.f32s(data);
    Ok(())
}

pub fn save_weights(model: &MsrnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<MsrnModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MsrnModel::from_bytes(&bytes)
}

/// Upscales a 3-channel image by the model's scale factor; output is
/// clamped to `[0, 1]`.
pub fn msrn_forward(lr: &ImageF, model: &MsrnModel) -> Result<ImageF> {
    if lr.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: lr.channels(),
        });
    }
    model.validate()?;
    let m0 = conv2d(&Tensor3::from_image(lr), &model.head)?;
    let mut maps = vec![m0];
    for block in &model.blocks {
        let next = msrb_forward(maps.last().unwrap(), block)?;
        maps.push(next);
    }
    let mut x = hffs(&maps, &model.hffs)?;
    for layer in &model.tail {
        x = conv2d(&x, layer)?;
    }
    let x = conv2d(&pixel_shuffle(&x, model.scale_factor)?, &model.output)?;
    let mut out = x.to_image()?;
    out.clamp01();
    Ok(out)
}
