//! Backbone + linear head classifier with hand-written backpropagation.
//!
//! A backbone is a stack of blocks, each `conv3x3 (same padding) -> ReLU
//! -> 2x2 average pool`. Global average pooling turns the last block's
//! output into a feature vector, and a linear head maps it to class
//! scores followed by softmax. Parameters are grouped per block so that
//! training stages can freeze whole blocks.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Backbone;
use crate::error::{read_file, Error, Result};
use crate::fsutil;

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Block output widths per backbone. These are compact CPU-scale stand-ins
/// that keep the block structure (what finetuning unfreezes) of the named
/// architectures.
pub fn block_widths(backbone: Backbone) -> &'static [usize] {
    match backbone {
        Backbone::Resnet50 => &[8, 16, 32, 64],
        Backbone::Vgg19 => &[8, 16, 32, 32, 64],
        Backbone::Densenet161 => &[12, 24, 48, 96],
        Backbone::Densenet201 => &[8, 16, 32, 64, 96],
    }
}

/// Channel-major activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    /// Normalized 3-channel tensor from an RGB image.
    pub fn from_image(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor::zeros(3, h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                let i = t.idx(c, y as usize, x as usize);
                t.data[i] = (f64::from(p[c]) / 255.0 - PIXEL_MEAN) / PIXEL_STD;
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`, 3x3 kernels.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

struct BlockCache {
    input: Tensor,
    pre_activation: Tensor,
    pooled: bool,
}

impl ConvBlock {
    fn random(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_channels * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        ConvBlock {
            in_channels,
            out_channels,
            weight: (0..out_channels * in_channels * 9)
                .map(|_| normal.sample(rng))
                .collect(),
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * 3 + ky) * 3 + kx
    }

    fn conv(&self, input: &Tensor) -> Tensor {
        let (h, w) = (input.height, input.width);
        let mut out = Tensor::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let plane = &mut out.data[o * h * w..(o + 1) * h * w];
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input.data[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.weight[self.widx(o, i, ky, kx)];
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1).saturating_sub(ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1).saturating_sub(kx).min(w);
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let dst = &mut plane[y * w + x_lo..y * w + x_hi];
                            let s = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                            for (d, v) in dst.iter_mut().zip(s) {
                                *d += k * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, input: &Tensor) -> (Tensor, BlockCache) {
        let pre = self.conv(input);
        let (c, h, w) = (pre.channels, pre.height, pre.width);
        let pooled = h >= 2 && w >= 2;
        let out = if pooled {
            let (ph, pw) = (h / 2, w / 2);
            let mut out = Tensor::zeros(c, ph, pw);
            for ch in 0..c {
                for y in 0..ph {
                    for x in 0..pw {
                        let mut s = 0.0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            s += pre.data[pre.idx(ch, 2 * y + dy, 2 * x + dx)].max(0.0);
                        }
                        let i = out.idx(ch, y, x);
                        out.data[i] = s / 4.0;
                    }
                }
            }
            out
        } else {
            let mut out = pre.clone();
            out.data.iter_mut().for_each(|v| *v = v.max(0.0));
            out
        };
        (
            out,
            BlockCache {
                input: input.clone(),
                pre_activation: pre,
                pooled,
            },
        )
    }

    /// Returns (grad wrt input, grad weight, grad bias). The input gradient
    /// is skipped when `need_input_grad` is false.
    fn backward(
        &self,
        cache: &BlockCache,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
        let pre = &cache.pre_activation;
        let (c, h, w) = (pre.channels, pre.height, pre.width);
        // through pool and ReLU
        let mut g = Tensor::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = pre.idx(ch, y, x);
                    if pre.data[i] <= 0.0 {
                        continue;
                    }
                    g.data[i] = if cache.pooled {
                        let (py, px) = (y / 2, x / 2);
                        if py < grad_out.height && px < grad_out.width {
                            grad_out.data[grad_out.idx(ch, py, px)] / 4.0
                        } else {
                            0.0
                        }
                    } else {
                        grad_out.data[i]
                    };
                }
            }
        }

        let input = &cache.input;
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_channels];
        let mut gin = need_input_grad.then(|| Tensor::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let gplane = &g.data[o * h * w..(o + 1) * h * w];
            gb[o] = gplane.iter().sum();
            for i in 0..self.in_channels {
                let src = &input.data[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wi = self.widx(o, i, ky, kx);
                        let k = self.weight[wi];
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1).saturating_sub(ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1).saturating_sub(kx).min(w);
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let gy = &gplane[y * w + x_lo..y * w + x_hi];
                            let s = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                            for (gv, sv) in gy.iter().zip(s) {
                                acc += gv * sv;
                            }
                            if let Some(gin) = gin.as_mut() {
                                let row = &mut gin.data[i * h * w + sy * w + x_lo + kx - 1
                                    ..i * h * w + sy * w + x_hi + kx - 1];
                                for (d, gv) in row.iter_mut().zip(gy) {
                                    *d += k * gv;
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
        (gin, gw, gb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub in_features: usize,
    pub classes: usize,
    /// `[class][feature]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Head {
    fn random(in_features: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_features as f64).sqrt()).expect("valid std");
        Head {
            in_features,
            classes,
            weight: (0..classes * in_features).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let row = &self.weight[k * self.in_features..(k + 1) * self.in_features];
                self.bias[k] + row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>()
            })
            .collect()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class_index: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let class_index = argmax(&probabilities);
        let confidence = probabilities[class_index];
        Prediction {
            probabilities,
            class_index,
            confidence,
        }
    }
}

/// Gradients laid out like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// `None` for blocks that were not back-propagated into.
    pub blocks: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
        axpy(&mut self.head_weight, &other.head_weight, scale);
        axpy(&mut self.head_bias, &other.head_bias, scale);
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            match (mine, theirs) {
                (Some((w, b)), Some((ow, ob))) => {
                    axpy(w, ow, scale);
                    axpy(b, ob, scale);
                }
                (slot @ None, Some((ow, ob))) => {
                    *slot = Some((
                        ow.iter().map(|v| v * scale).collect(),
                        ob.iter().map(|v| v * scale).collect(),
                    ))
                }
                _ => {}
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.head_weight.iter().chain(&self.head_bias).all(|v| v.is_finite())
            && self
                .blocks
                .iter()
                .flatten()
                .all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub backbone: Backbone,
    pub input_dim: u32,
    pub blocks: Vec<ConvBlock>,
    pub head: Head,
}

/// Where backbone weights came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    Pretrained,
    Random,
    RandomFallback,
}

/// Supplies pretrained backbone blocks.
pub trait WeightsProvider {
    fn load(&self, backbone: Backbone) -> Result<Vec<ConvBlock>>;
}

/// Reads `{dir}/{backbone}.json`, a JSON list of blocks.
#[derive(Clone, Debug)]
pub struct DirWeights {
    pub dir: PathBuf,
}

impl DirWeights {
    pub fn path_for(&self, backbone: Backbone) -> PathBuf {
        self.dir.join(format!("{backbone}.json"))
    }

    pub fn save(&self, backbone: Backbone, blocks: &[ConvBlock]) -> Result<()> {
        let p = self.path_for(backbone);
        fsutil::write_json(&p, blocks).map_err(|e| Error::io(&p, e))
    }
}

impl WeightsProvider for DirWeights {
    fn load(&self, backbone: Backbone) -> Result<Vec<ConvBlock>> {
        let path = self.path_for(backbone);
        if !path.is_file() {
            return Err(Error::WeightsUnavailable {
                backbone: backbone.to_string(),
                path,
            });
        }
        serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::MalformedFile {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub struct BuildOptions<'a> {
    pub pretrained: bool,
    pub allow_random_fallback: bool,
    pub provider: Option<&'a dyn WeightsProvider>,
    pub seed: u64,
    pub input_dim: u32,
}

impl ClassifierModel {
    /// Randomly initialized backbone and head.
    pub fn random(backbone: Backbone, classes: usize, input_dim: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for &out in block_widths(backbone) {
            blocks.push(ConvBlock::random(in_ch, out, &mut rng));
            in_ch = out;
        }
        let head = Head::random(in_ch, classes, &mut rng);
        ClassifierModel {
            backbone,
            input_dim,
            blocks,
            head,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes
    }

    /// Forward pass to class probabilities.
    pub fn forward(&self, input: &Tensor) -> Vec<f64> {
        softmax(&self.head.logits(&self.features(input)))
    }

    fn features(&self, input: &Tensor) -> Vec<f64> {
        let mut x = input.clone();
        for b in &self.blocks {
            x = b.forward(&x).0;
        }
        global_average(&x)
    }

    /// Weighted cross-entropy loss and gradients for one sample.
    ///
    /// Blocks with index `>= first_trainable` receive gradients; with
    /// `first_trainable == blocks.len()` only the head does.
    pub fn loss_and_gradients(
        &self,
        input: &Tensor,
        target: usize,
        class_weight: f64,
        first_trainable: usize,
    ) -> (f64, Gradients) {
        let n = self.blocks.len();
        let first = first_trainable.min(n);
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(n);
        for (i, b) in self.blocks.iter().enumerate() {
            let (out, cache) = b.forward(&x);
            if i >= first {
                caches.push(cache);
            }
            x = out;
        }
        let feats = global_average(&x);
        let probs = softmax(&self.head.logits(&feats));
        let loss = -class_weight * probs[target].max(f64::MIN_POSITIVE).ln();

        let g = self.head.classes;
        let f = self.head.in_features;
        let dlogits: Vec<f64> = (0..g)
            .map(|k| class_weight * (probs[k] - if k == target { 1.0 } else { 0.0 }))
            .collect();
        let mut head_weight = vec![0.0; g * f];
        for k in 0..g {
            for j in 0..f {
                head_weight[k * f + j] = dlogits[k] * feats[j];
            }
        }
        let mut grads = Gradients {
            blocks: vec![None; n],
            head_weight,
            head_bias: dlogits.clone(),
        };
        if first == n {
            return (loss, grads);
        }

        // into the pooled features, then spread over the spatial grid
        let dfeat: Vec<f64> = (0..f)
            .map(|j| (0..g).map(|k| dlogits[k] * self.head.weight[k * f + j]).sum())
            .collect();
        let area = (x.height * x.width) as f64;
        let mut grad = Tensor::zeros(x.channels, x.height, x.width);
        for c in 0..x.channels {
            let plane = &mut grad.data[c * x.height * x.width..(c + 1) * x.height * x.width];
            plane.fill(dfeat[c] / area);
        }
        for (offset, cache) in caches.iter().enumerate().rev() {
            let bi = first + offset;
            let (gin, gw, gb) = self.blocks[bi].backward(cache, &grad, bi > first);
            grads.blocks[bi] = Some((gw, gb));
            if let Some(gin) = gin {
                grad = gin;
            }
        }
        (loss, grads)
    }

    /// Hex digest of every backbone parameter's bit pattern, per block.
    pub fn block_checksums(&self) -> Vec<String> {
        self.blocks
            .iter()
            .map(|b| {
                let mut h = Sha256::new();
                for v in b.weight.iter().chain(&b.bias) {
                    h.update(v.to_bits().to_le_bytes());
                }
                hex::encode(h.finalize())
            })
            .collect()
    }

    pub fn head_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.head.weight.iter().chain(&self.head.bias) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        fsutil::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::MalformedFile {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn global_average(x: &Tensor) -> Vec<f64> {
    let area = (x.height * x.width) as f64;
    (0..x.channels)
        .map(|c| x.data[c * x.height * x.width..(c + 1) * x.height * x.width].iter().sum::<f64>() / area)
        .collect()
}

/// Build a classifier for `classes` outputs.
pub fn build_model(backbone: Backbone, classes: usize, opts: &BuildOptions<'_>) -> Result<(ClassifierModel, WeightsSource)> {
    if classes < 2 {
        return Err(Error::InvalidValue {
            path: "classes".into(),
            constraint: format!("a classifier needs at least 2 classes, got {classes}"),
        });
    }
    let mut model = ClassifierModel::random(backbone, classes, opts.input_dim, opts.seed);
    if !opts.pretrained {
        return Ok((model, WeightsSource::Random));
    }
    let loaded = match opts.provider {
        Some(p) => p.load(backbone),
        None => Err(Error::WeightsUnavailable {
            backbone: backbone.to_string(),
            path: PathBuf::new(),
        }),
    };
    match loaded {
        Ok(blocks) => {
            check_blocks(backbone, &blocks)?;
            model.blocks = blocks;
            Ok((model, WeightsSource::Pretrained))
        }
        Err(e @ Error::WeightsUnavailable { .. }) if opts.allow_random_fallback => {
            log::warn!("{e}; continuing with randomly initialized backbone");
            Ok((model, WeightsSource::RandomFallback))
        }
        Err(e) => Err(e),
    }
}

fn check_blocks(backbone: Backbone, blocks: &[ConvBlock]) -> Result<()> {
    let widths = block_widths(backbone);
    let got: Vec<usize> = blocks.iter().map(|b| b.out_channels).collect();
    let mut in_ch = 3;
    let ok = got == widths
        && blocks.iter().all(|b| {
            let fits = b.in_channels == in_ch
                && b.weight.len() == b.out_channels * b.in_channels * 9
                && b.bias.len() == b.out_channels;
            in_ch = b.out_channels;
            fits
        });
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: format!("{backbone} blocks {widths:?}"),
            got: format!("{got:?}"),
        })
    }
}

/// Class probabilities, hard label and confidence for one image.
pub fn predict(model: &ClassifierModel, image: &RgbImage) -> Result<Prediction> {
    let d = model.input_dim;
    if image.dimensions() != (d, d) {
        return Err(Error::ShapeMismatch {
            expected: format!("{d}x{d}x3"),
            got: format!("{}x{}x3", image.width(), image.height()),
        });
    }
    Ok(Prediction::from_probabilities(model.forward(&Tensor::from_image(image))))
}
