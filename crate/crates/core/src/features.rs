//! Multi-level neural feature extraction and Gram matrices.
//!
//! Pyramid levels are numbered `1..=L` with level `L` at the input resolution
//! and level `l` at stride `2^(L-l)`. An extractor exposes its stages by depth
//! `d = L - l`: depth 0 is the full-resolution stage, each deeper stage halves
//! the resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use refsr_autograd::ops::{add_bias, avg_pool2, max_pool2, pad, relu, scale};
use refsr_autograd::{conv2d, matmul, no_grad, ops, PadMode, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail_arg, Error, Result};
use crate::imaging::ImageTensor;

/// An `H×W×C` feature map, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            bail_arg!("feature map dimensions must be positive, got {height}x{width}x{channels}");
        }
        if data.len() != height * width * channels {
            bail_arg!(
                "{height}x{width}x{channels} feature map needs {} values, got {}",
                height * width * channels,
                data.len()
            );
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// The channel vector at `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let s = (y * self.width + x) * self.channels;
        &self.data[s..s + self.channels]
    }

    /// `[1, H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width, self.channels], self.data.clone())
    }

    /// Sample `index` of an `[N, H, W, C]` tensor.
    pub fn from_batch(t: &Tensor, index: usize) -> Self {
        let [_, h, w, c] = t.dims4();
        let per = h * w * c;
        Self { height: h, width: w, channels: c, data: t.data()[index * per..(index + 1) * per].to_vec() }
    }

    pub fn stack(maps: &[FeatureMap]) -> Result<Tensor> {
        let Some(first) = maps.first() else { bail_arg!("cannot stack an empty batch") };
        let mut data = Vec::with_capacity(first.data.len() * maps.len());
        for m in maps {
            if m.dims() != first.dims() {
                bail_arg!("feature maps differ in shape: {:?} vs {:?}", m.dims(), first.dims());
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Tensor::new(&[maps.len(), first.height, first.width, first.channels], data))
    }
}

/// Feature maps of one image at a set of pyramid levels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub top_level: usize,
    pub levels: BTreeMap<usize, FeatureMap>,
    pub extractor_id: String,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> Result<&FeatureMap> {
        self.levels
            .get(&l)
            .ok_or_else(|| Error::Argument(format!("pyramid has no level {l} (has {:?})", self.levels.keys())))
    }
}

/// Channel-by-channel second moments `g[i][j] = (1/N) Σ_p f[p,i]·f[p,j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub channels: usize,
    pub n_positions: usize,
    /// Row-major `C×C`.
    pub g: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.channels + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.channels], self.g.clone())
    }
}

pub fn gram(feat: &FeatureMap) -> GramMatrix {
    let g = no_grad(|| gram_var(&Var::constant(feat.to_tensor())));
    GramMatrix { channels: feat.channels, n_positions: feat.height * feat.width, g: g.value().data().to_vec() }
}

/// Differentiable Gram matrices of an `[N, H, W, C]` batch, shaped `[N, C, C]`.
pub fn gram_var(feat: &Var) -> Var {
    let [n, h, w, c] = feat.value().dims4();
    let flat = ops::reshape(feat, &[n, h * w, c]);
    scale(&matmul(&flat, &flat, true, false), 1.0 / (h * w) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorConfig {
    /// Seeded random convolutional stack; needs no external weights.
    FixedSeedFallback { seed: u64, widths: Vec<usize> },
    /// VGG19 conv layers up to `conv5_1`, loaded from a safetensors archive
    /// using torchvision's `features.<i>.{weight,bias}` names.
    PretrainedBackbone { weights: PathBuf, sha256: Option<String> },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::FixedSeedFallback { seed: 0, widths: vec![16, 32, 64, 128] }
    }
}

/// Outputs of one extractor pass.
pub struct Taps {
    /// Stage outputs by depth (0 = full resolution).
    pub depths: Vec<Var>,
    /// The perceptual-loss layer, when requested.
    pub perceptual: Option<Var>,
}

struct FallbackStage {
    weight: Var,
}

struct VggConv {
    weight: Var,
    bias: Var,
}

enum Backbone {
    Fallback(Vec<FallbackStage>),
    Vgg19(Vec<VggConv>),
}

/// A frozen feature extractor. Parameters are constants: gradients flow
/// through it to its input only.
pub struct FeatureExtractor {
    id: String,
    backbone: Backbone,
}

/// Torchvision `features` indices of the VGG19 convolutions through conv5_1,
/// grouped into blocks that end in a tap (relu1_1, relu2_1, ..., relu5_1).
const VGG_BLOCKS: [&[usize]; 5] = [&[0], &[2, 5], &[7, 10], &[12, 14, 16, 19], &[21, 23, 25, 28]];
const VGG_CHANNELS: [(usize, usize); 13] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 256),
    (256, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl FeatureExtractor {
    pub fn from_config(cfg: &ExtractorConfig) -> Result<Self> {
        match cfg {
            ExtractorConfig::FixedSeedFallback { seed, widths } => Self::fallback(*seed, widths),
            ExtractorConfig::PretrainedBackbone { weights, sha256 } => Self::vgg19(weights, sha256.as_deref()),
        }
    }

    /// Seeded stack of 3×3 convolutions (replicate padding, no bias) with
    /// ReLU, and 2×2 average pooling between stages. Weights are standard
    /// normal draws from `ChaCha8Rng::seed_from_u64(seed)`, taken stage by
    /// stage in `[KH, KW, C_in, C_out]` order, scaled by `sqrt(2 / fan_in)`.
    pub fn fallback(seed: u64, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            bail_arg!("fallback extractor needs at least one positive stage width, got {widths:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for &cout in widths {
            let fan_in = (9 * cin) as f64;
            let k = (2.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..9 * cin * cout)
                .map(|_| k * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            stages.push(FallbackStage { weight: Var::constant(Tensor::new(&[3, 3, cin, cout], data)) });
            cin = cout;
        }
        let widths_id: Vec<String> = widths.iter().map(ToString::to_string).collect();
        Ok(Self { id: format!("fallback-seed{seed}-w{}", widths_id.join(".")), backbone: Backbone::Fallback(stages) })
    }

    /// Loads VGG19 weights from a safetensors archive, verifying its SHA-256
    /// when one is pinned.
    pub fn vgg19(path: &Path, sha256: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Configuration(format!(
                "pretrained backbone weights not readable at {} ({e}); expected a VGG19 safetensors archive",
                path.display()
            ))
        })?;
        let digest = hex_digest(&bytes);
        if let Some(expected) = sha256 {
            if !expected.eq_ignore_ascii_case(&digest) {
                return Err(Error::Configuration(format!(
                    "checksum mismatch for {}: expected {expected}, got {digest}",
                    path.display()
                )));
            }
        }
        let archive = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let indices: Vec<usize> = VGG_BLOCKS.iter().flat_map(|b| b.iter().copied()).collect();
        let mut convs = Vec::with_capacity(indices.len());
        for (&idx, &(cin, cout)) in indices.iter().zip(&VGG_CHANNELS) {
            let w = read_f64(&archive, &format!("features.{idx}.weight"), &[cout, cin, 3, 3])?;
            let b = read_f64(&archive, &format!("features.{idx}.bias"), &[cout])?;
            // [out, in, kh, kw] -> [kh, kw, in, out]
            let mut hwio = vec![0.0; w.len()];
            for o in 0..cout {
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            hwio[((ky * 3 + kx) * cin + i) * cout + o] = w[((o * cin + i) * 3 + ky) * 3 + kx];
                        }
                    }
                }
            }
            convs.push(VggConv {
                weight: Var::constant(Tensor::new(&[3, 3, cin, cout], hwio)),
                bias: Var::constant(Tensor::new(&[cout], b)),
            });
        }
        Ok(Self { id: format!("vgg19-{}", &digest[..16]), backbone: Backbone::Vgg19(convs) })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Number of pyramid stages (so the deepest usable level is `L - depth_count + 1`).
    pub fn depth_count(&self) -> usize {
        match &self.backbone {
            Backbone::Fallback(stages) => stages.len(),
            Backbone::Vgg19(_) => 4,
        }
    }

    /// Channel count of the stage at `depth`.
    pub fn channels_at(&self, depth: usize) -> Result<usize> {
        match &self.backbone {
            Backbone::Fallback(stages) => stages
                .get(depth)
                .map(|s| s.weight.shape()[3])
                .ok_or_else(|| Error::Argument(format!("extractor has no depth {depth}"))),
            Backbone::Vgg19(_) => [64, 128, 256, 512]
                .get(depth)
                .copied()
                .ok_or_else(|| Error::Argument(format!("extractor has no depth {depth}"))),
        }
    }

    /// Total spatial stride of the perceptual layer.
    pub fn perceptual_stride(&self) -> usize {
        match &self.backbone {
            Backbone::Fallback(stages) => 1 << (stages.len() - 1),
            Backbone::Vgg19(_) => 16,
        }
    }

    /// Runs the extractor on an `[N, H, W, 3]` batch, returning stage outputs
    /// for depths `0..=max_depth` and optionally the perceptual layer.
    pub fn taps(&self, x: &Var, max_depth: usize, perceptual: bool) -> Result<Taps> {
        let [_, h, w, c] = x.value().dims4();
        if c != 3 {
            bail_arg!("feature extractor expects RGB input, got {c} channels");
        }
        if max_depth >= self.depth_count() {
            bail_arg!("extractor `{}` has {} pyramid stages, depth {max_depth} requested", self.id, self.depth_count());
        }
        let needed = if perceptual { self.perceptual_stride() } else { 1 << max_depth };
        if h % needed != 0 || w % needed != 0 {
            bail_arg!("input {h}x{w} is not divisible by the extractor stride {needed}");
        }
        match &self.backbone {
            Backbone::Fallback(stages) => {
                let last = if perceptual { stages.len() - 1 } else { max_depth };
                let mut depths = Vec::new();
                let mut cur = x.clone();
                for (d, stage) in stages.iter().enumerate().take(last + 1) {
                    if d > 0 {
                        cur = avg_pool2(&cur);
                    }
                    cur = relu(&conv2d(&pad(&cur, 1, PadMode::Replicate), &stage.weight, 1));
                    if d <= max_depth {
                        depths.push(cur.clone());
                    }
                }
                Ok(Taps { depths, perceptual: perceptual.then_some(cur) })
            }
            Backbone::Vgg19(convs) => {
                let last_block = if perceptual { 4 } else { max_depth };
                let mean = Var::constant(Tensor::new(&[3], IMAGENET_MEAN.to_vec()));
                let inv_std = Rc::new(Tensor::new(
                    x.shape(),
                    (0..x.value().numel()).map(|i| 1.0 / IMAGENET_STD[i % 3]).collect(),
                ));
                let mut cur = ops::mul_const(&ops::sub(x, &ops::broadcast_channels(&mean, x.shape())), inv_std);
                let mut depths = Vec::new();
                let mut conv_iter = convs.iter();
                let mut perceptual_out = None;
                for (block, idxs) in VGG_BLOCKS.iter().enumerate().take(last_block + 1) {
                    for k in 0..idxs.len() {
                        // Max-pooling precedes the tapped conv of every block after the first.
                        if block > 0 && k + 1 == idxs.len() {
                            cur = max_pool2(&cur);
                        }
                        let conv = conv_iter.next().expect("vgg layer table");
                        cur = relu(&add_bias(&conv2d(&pad(&cur, 1, PadMode::Zero), &conv.weight, 1), &conv.bias));
                    }
                    if block < 4 && block <= max_depth {
                        depths.push(cur.clone());
                    } else if block == 4 {
                        perceptual_out = Some(cur.clone());
                    }
                }
                Ok(Taps { depths, perceptual: perceptual_out })
            }
        }
    }

    /// The perceptual-loss features of an `[N, H, W, 3]` batch.
    pub fn perceptual(&self, x: &Var) -> Result<Var> {
        let taps = self.taps(x, 0, true)?;
        taps.perceptual.ok_or_else(|| Error::Configuration(format!("extractor `{}` has no perceptual layer", self.id)))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_f64(archive: &safetensors::SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let view = archive
        .tensor(name)
        .map_err(|_| Error::Configuration(format!("backbone archive lacks tensor `{name}`")))?;
    if view.shape() != shape {
        return Err(Error::Configuration(format!("`{name}` has shape {:?}, expected {shape:?}", view.shape())));
    }
    let raw = view.data();
    let values = match view.dtype() {
        safetensors::Dtype::F32 => {
            raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))).collect()
        }
        safetensors::Dtype::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        other => return Err(Error::Configuration(format!("`{name}` has unsupported dtype {other:?}"))),
    };
    Ok(values)
}

/// Extracts feature maps at `levels` (each in `top_level - depth_count + 1 ..= top_level`).
pub fn extract_pyramid(
    img: &ImageTensor,
    levels: &[usize],
    top_level: usize,
    extractor: &FeatureExtractor,
) -> Result<FeaturePyramid> {
    let Some(&lowest) = levels.iter().min() else { bail_arg!("no pyramid levels requested") };
    if levels.iter().any(|&l| l > top_level || l == 0) {
        bail_arg!("levels {levels:?} must lie in 1..={top_level}");
    }
    let max_depth = top_level - lowest;
    let stride = 1usize << max_depth;
    if !img.height().is_multiple_of(stride) || !img.width().is_multiple_of(stride) {
        bail_arg!(
            "{}x{} image is not divisible by 2^{max_depth} = {stride} needed for level {lowest}",
            img.height(),
            img.width()
        );
    }
    let taps = no_grad(|| extractor.taps(&Var::constant(img.to_tensor()), max_depth, false))?;
    let mut out = BTreeMap::new();
    for &l in levels {
        out.insert(l, FeatureMap::from_batch(taps.depths[top_level - l].value(), 0));
    }
    Ok(FeaturePyramid { top_level, levels: out, extractor_id: extractor.id.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn brute_gram(f: &FeatureMap) -> Vec<f64> {
        let (h, w, c) = f.dims();
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += f.get(y, x, i) * f.get(y, x, j);
                    }
                }
                g[i * c + j] = acc / (h * w) as f64;
            }
        }
        g
    }

    #[test]
    fn gram_examples() {
        let ones = FeatureMap::new(3, 5, 1, vec![1.0; 15]).unwrap();
        assert!((gram(&ones).g[0] - 1.0).abs() < 1e-15);

        let base = random_map(4, 4, 1, 1);
        let data: Vec<f64> = base.data().iter().flat_map(|&v| [v, -v]).collect();
        let pair = gram(&FeatureMap::new(4, 4, 2, data).unwrap());
        assert!((pair.get(0, 1) + pair.get(0, 0)).abs() < 1e-15);

        let r = random_map(4, 4, 3, 2);
        let g = gram(&r);
        assert_eq!(g.n_positions, 16);
        for (a, b) in g.g.iter().zip(brute_gram(&r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in 0u64..10_000) {
            let g = gram(&random_map(h, w, c, seed));
            let m = nalgebra::DMatrix::from_row_slice(c, c, &g.g);
            prop_assert!((&m - m.transpose()).abs().max() < 1e-12);
            let eig = nalgebra::SymmetricEigen::new(m);
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8));
        }
    }

    #[test]
    fn fallback_pyramid_shapes_and_determinism() {
        let ex = FeatureExtractor::fallback(7, &[16, 32, 64, 128]).unwrap();
        let img = ImageTensor::from_fn(64, 64, ColorSpace::Rgb, |y, x, c| ((y * 3 + x * 5 + c) % 13) as f64 / 12.0).unwrap();
        let p = extract_pyramid(&img, &[1, 3], 3, &ex).unwrap();
        assert_eq!(p.level(1).unwrap().dims(), (16, 16, 64));
        assert_eq!(p.level(3).unwrap().dims(), (64, 64, 16));
        let again = extract_pyramid(&img, &[1, 3], 3, &FeatureExtractor::fallback(7, &[16, 32, 64, 128]).unwrap()).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn constant_input_gives_spatially_constant_features() {
        let ex = FeatureExtractor::fallback(3, &[16, 32, 64, 128]).unwrap();
        let img = ImageTensor::filled(16, 16, ColorSpace::Rgb, 0.4).unwrap();
        let p = extract_pyramid(&img, &[1, 2, 3, 4], 4, &ex).unwrap();
        for map in p.levels.values() {
            let first = map.pixel(0, 0).to_vec();
            for y in 0..map.height() {
                for x in 0..map.width() {
                    for (a, b) in map.pixel(y, x).iter().zip(&first) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pyramid_argument_errors() {
        let ex = FeatureExtractor::fallback(0, &[4, 8, 8, 8]).unwrap();
        let img = ImageTensor::filled(12, 12, ColorSpace::Rgb, 0.4).unwrap();
        assert!(matches!(extract_pyramid(&img, &[1], 4, &ex), Err(Error::Argument(_))));
        assert!(matches!(extract_pyramid(&img, &[5], 4, &ex), Err(Error::Argument(_))));
        assert!(matches!(extract_pyramid(&img, &[], 4, &ex), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_backbone_weights_name_the_file() {
        let cfg = ExtractorConfig::PretrainedBackbone { weights: "/nonexistent/vgg19.safetensors".into(), sha256: None };
        match FeatureExtractor::from_config(&cfg) {
            Err(Error::Configuration(msg)) => assert!(msg.contains("vgg19.safetensors"), "{msg}"),
            other => panic!("expected configuration error, got {:?}", other.err()),
        }
    }

    #[test]
    fn vgg_archive_is_loaded_and_checksummed() {
        // A synthetic archive with the right names and shapes.
        let indices: Vec<usize> = VGG_BLOCKS.iter().flat_map(|b| b.iter().copied()).collect();
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (&idx, &(cin, cout)) in indices.iter().zip(&VGG_CHANNELS) {
            let w: Vec<u8> = (0..cout * cin * 9).flat_map(|i| (((i % 7) as f32 - 3.0) * 0.01).to_le_bytes()).collect();
            let b: Vec<u8> = (0..cout).flat_map(|_| 0.01f32.to_le_bytes()).collect();
            buffers.push((format!("features.{idx}.weight"), vec![cout, cin, 3, 3], w));
            buffers.push((format!("features.{idx}.bias"), vec![cout], b));
        }
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = buffers
            .iter()
            .map(|(n, s, d)| (n.clone(), safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), d).unwrap()))
            .collect();
        let bytes = safetensors::serialize(views, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg19.safetensors");
        std::fs::write(&path, &bytes).unwrap();

        let ex = FeatureExtractor::vgg19(&path, Some(&hex_digest(&bytes))).unwrap();
        assert_eq!(ex.depth_count(), 4);
        let img = ImageTensor::filled(32, 32, ColorSpace::Rgb, 0.5).unwrap();
        let p = extract_pyramid(&img, &[1, 2, 3, 4], 4, &ex).unwrap();
        assert_eq!(p.level(4).unwrap().dims(), (32, 32, 64));
        assert_eq!(p.level(1).unwrap().dims(), (4, 4, 512));
        let per = ex.perceptual(&Var::constant(img.to_tensor())).unwrap();
        assert_eq!(per.shape(), &[1, 2, 2, 512]);

        assert!(matches!(FeatureExtractor::vgg19(&path, Some("00")), Err(Error::Configuration(_))));
    }
}
