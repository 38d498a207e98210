//! Trainable networks: feature upscaler, fusion/reconstruction head,
//! degradation network and critic. None of them use normalization layers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use refsr_autograd::ops::{add, add_bias, concat_channels, leaky_relu, pad, pixel_shuffle, relu, reshape};
use refsr_autograd::{conv2d, matmul, no_grad, PadMode, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container};
use crate::error::{bail_arg, Error, Result};
use crate::features::FeatureMap;
use crate::imaging::ImageTensor;

/// Version of the parameter layout; bumped when layer naming changes.
pub const PARAMS_VERSION: u32 = 1;

const LEAKY_SLOPE: f64 = 0.2;
/// Initial gain of the last convolution in each residual block.
const RESIDUAL_GAIN: f64 = 0.1;
/// Initial gain of the image-producing output stage of the degrader and fusion network.
const OUTPUT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpscalerConfig {
    pub scale: usize,
    pub width: usize,
    pub blocks: usize,
}

impl UpscalerConfig {
    pub fn new(scale: usize) -> Self {
        Self { scale, width: 64, blocks: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Channels of the upscaled features `F_SR`.
    pub width: usize,
    /// Channels of the transferred features `F_T`.
    pub transfer_channels: usize,
    pub blocks: usize,
}

impl FusionConfig {
    pub fn new(transfer_channels: usize) -> Self {
        Self { width: 64, transfer_channels, blocks: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegraderConfig {
    pub scale: usize,
    pub width: usize,
}

impl DegraderConfig {
    pub fn new(scale: usize) -> Self {
        Self { scale, width: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub stages: usize,
    pub base_width: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { stages: 5, base_width: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ArchConfig {
    Upscaler(UpscalerConfig),
    Fusion(FusionConfig),
    Degrader(DegraderConfig),
    Critic(CriticConfig),
}

impl ArchConfig {
    pub fn arch_id(&self) -> &'static str {
        match self {
            ArchConfig::Upscaler(_) => "upscaler",
            ArchConfig::Fusion(_) => "fusion",
            ArchConfig::Degrader(_) => "degrader",
            ArchConfig::Critic(_) => "critic",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Configuration(msg));
        match *self {
            ArchConfig::Upscaler(c) => {
                check_scale(c.scale)?;
                if c.width == 0 {
                    return bad("upscaler width must be positive".into());
                }
            }
            ArchConfig::Fusion(c) => {
                if c.width == 0 || c.transfer_channels == 0 {
                    return bad("fusion widths must be positive".into());
                }
            }
            ArchConfig::Degrader(c) => {
                check_scale(c.scale)?;
                if c.width == 0 {
                    return bad("degrader width must be positive".into());
                }
            }
            ArchConfig::Critic(c) => {
                if c.stages == 0 || c.base_width == 0 {
                    return bad("critic needs at least one stage of positive width".into());
                }
            }
        }
        Ok(())
    }
}

fn check_scale(s: usize) -> Result<()> {
    if s < 2 || !s.is_power_of_two() {
        return Err(Error::Configuration(format!("scale must be a power of two ≥ 2, got {s}")));
    }
    Ok(())
}

/// One parameterized layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Square convolution with the given kernel size and stride.
    Conv { kernel: usize, stride: usize },
    /// Fully connected layer.
    Dense,
}

impl Layer {
    fn conv(name: impl Into<String>, kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Conv { kernel, stride }, cin, cout }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { kernel, .. } => vec![kernel, kernel, self.cin, self.cout],
            LayerKind::Dense => vec![self.cin, self.cout],
        }
    }

    fn fan_in(&self) -> usize {
        self.weight_shape()[..self.weight_shape().len() - 1].iter().product()
    }
}

fn stages_for(scale: usize) -> usize {
    scale.trailing_zeros() as usize
}

/// Parameterized layers of an architecture, in initialization order.
pub fn layers(cfg: &ArchConfig) -> Vec<Layer> {
    let mut out = Vec::new();
    match *cfg {
        ArchConfig::Upscaler(c) => {
            out.push(Layer::conv("conv_in", 3, 1, 3, c.width));
            for i in 0..c.blocks {
                out.push(Layer::conv(format!("res{i}.conv1"), 3, 1, c.width, c.width));
                out.push(Layer::conv(format!("res{i}.conv2"), 3, 1, c.width, c.width));
            }
            for k in 0..stages_for(c.scale) {
                out.push(Layer::conv(format!("up{k}.expand"), 3, 1, c.width, 4 * c.width));
                out.push(Layer::conv(format!("up{k}.conv"), 3, 1, c.width, c.width));
            }
        }
        ArchConfig::Fusion(c) => {
            out.push(Layer::conv("conv_in", 3, 1, c.width + c.transfer_channels, c.width));
            for i in 0..c.blocks {
                out.push(Layer::conv(format!("res{i}.conv1"), 3, 1, c.width, c.width));
                out.push(Layer::conv(format!("res{i}.conv2"), 3, 1, c.width, c.width));
            }
            out.push(Layer::conv("conv_out", 3, 1, c.width, c.width));
            out.push(Layer::conv("rec", 3, 1, c.width, 3));
        }
        ArchConfig::Degrader(c) => {
            let n = stages_for(c.scale);
            for k in 0..n {
                let cin = if k == 0 { 3 } else { c.width };
                let cout = if k + 1 == n { 3 } else { c.width };
                out.push(Layer::conv(format!("stage{k}"), 4, 2, cin, cout));
            }
        }
        ArchConfig::Critic(c) => {
            let mut cin = 3;
            for k in 0..c.stages {
                let cout = c.base_width << k;
                out.push(Layer::conv(format!("stage{k}"), 4, 2, cin, cout));
                cin = cout;
            }
            out.push(Layer { name: "head".into(), kind: LayerKind::Dense, cin, cout: 1 });
        }
    }
    out
}

/// A parameter set with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: ArchConfig,
    pub version: u32,
    /// `<layer>.w` and `<layer>.b` for every layer.
    pub tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    /// He-normal weights from `ChaCha8Rng::seed_from_u64(seed)` and zero
    /// biases. The last convolution of each residual branch and the output
    /// stage of the degrader and fusion network are scaled by 0.1.
    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let all = layers(&config);
        let n_layers = all.len();
        for (i, layer) in all.into_iter().enumerate() {
            let shape = layer.weight_shape();
            let mut std = (2.0 / layer.fan_in() as f64).sqrt();
            let fusion = matches!(config, ArchConfig::Fusion(_));
            if layer.name.ends_with(".conv2") || (fusion && layer.name == "conv_out") {
                std *= RESIDUAL_GAIN;
            }
            if matches!(config, ArchConfig::Degrader(_) | ArchConfig::Fusion(_)) && i + 1 == n_layers {
                std *= OUTPUT_GAIN;
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            tensors.insert(format!("{}.w", layer.name), Tensor::new(&shape, data));
            tensors.insert(format!("{}.b", layer.name), Tensor::zeros(&[layer.cout]));
        }
        Ok(Self { config, version: PARAMS_VERSION, tensors })
    }

    /// All parameters zero.
    pub fn zeros(config: ArchConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        p.tensors.values_mut().for_each(|t| t.data_mut().fill(0.0));
        Ok(p)
    }

    pub fn arch_id(&self) -> &'static str {
        self.config.arch_id()
    }

    pub fn expect_arch(&self, arch_id: &str) -> Result<()> {
        if self.arch_id() != arch_id {
            return Err(Error::Configuration(format!(
                "expected `{arch_id}` parameters, got `{}`",
                self.arch_id()
            )));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that the tensors are exactly those the architecture needs.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.version != PARAMS_VERSION {
            return Err(Error::Configuration(format!(
                "parameter layout version {}, expected {PARAMS_VERSION}",
                self.version
            )));
        }
        let mut expected = BTreeMap::new();
        for layer in layers(&self.config) {
            expected.insert(format!("{}.w", layer.name), layer.weight_shape());
            expected.insert(format!("{}.b", layer.name), vec![layer.cout]);
        }
        if expected.len() != self.tensors.len() {
            return Err(Error::Configuration(format!(
                "`{}` needs {} tensors, found {}",
                self.arch_id(),
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Configuration(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Configuration(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    /// Wraps the tensors as graph leaves, trainable or constant.
    pub fn bind(&self, trainable: bool) -> Bound {
        let leaf = if trainable { Var::param } else { Var::constant };
        Bound { vars: self.tensors.iter().map(|(k, t)| (k.clone(), leaf(t.clone()))).collect() }
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "arch_id": self.arch_id(), "version": self.version, "config": self.config })
    }

    fn from_meta(meta: &serde_json::Value, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let config: ArchConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Configuration(format!("bad architecture config: {e}")))?;
        if meta["arch_id"].as_str() != Some(config.arch_id()) {
            return Err(Error::Configuration(format!(
                "arch_id {} does not match config `{}`",
                meta["arch_id"],
                config.arch_id()
            )));
        }
        let version = meta["version"]
            .as_u64()
            .ok_or_else(|| Error::Configuration("parameter file lacks a version".into()))? as u32;
        let p = Self { config, version, tensors };
        p.validate()?;
        Ok(p)
    }

    pub fn to_container(&self) -> Container {
        Container { meta: self.meta(), tensors: self.tensors.clone() }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        Self::from_meta(&c.meta, c.tensors)
    }
}

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    checkpoint::save(&params.to_container(), path)
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let c = checkpoint::load(path)?;
    if c.meta.get("arch_id").and_then(|v| v.as_str()) == Some(GENERATOR_ARCH) {
        return Err(Error::Configuration(format!(
            "{} holds a generator; load it with `Generator::load`",
            path.display()
        )));
    }
    NetworkParams::from_container(c)
}

/// Graph leaves for one parameter set.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    fn get(&self, name: &str) -> &Var {
        &self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Names and leaves in a fixed order, for gradient requests.
    pub fn flat(&self) -> (Vec<String>, Vec<Var>) {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).unzip()
    }

    fn conv(&self, layer: &str, x: &Var, stride: usize, mode: PadMode) -> Var {
        let w = self.get(&format!("{layer}.w"));
        add_bias(&conv2d(&pad(x, 1, mode), w, stride), self.get(&format!("{layer}.b")))
    }
}

fn res_blocks(p: &Bound, h: Var, blocks: usize) -> Var {
    let mut h = h;
    for i in 0..blocks {
        let t = relu(&p.conv(&format!("res{i}.conv1"), &h, 1, PadMode::Zero));
        h = add(&h, &p.conv(&format!("res{i}.conv2"), &t, 1, PadMode::Zero));
    }
    h
}

/// `[N, h, w, 3]` → `[N, s·h, s·w, width]`.
pub fn upscaler_forward(cfg: &UpscalerConfig, p: &Bound, lr: &Var) -> Var {
    let x = p.conv("conv_in", lr, 1, PadMode::Zero);
    let mut h = add(&res_blocks(p, x.clone(), cfg.blocks), &x);
    let n = stages_for(cfg.scale);
    for k in 0..n {
        h = pixel_shuffle(&p.conv(&format!("up{k}.expand"), &h, 1, PadMode::Zero), 2);
        h = p.conv(&format!("up{k}.conv"), &h, 1, PadMode::Zero);
        if k + 1 < n {
            h = relu(&h);
        }
    }
    h
}

/// `H_Rec(H_Res([F_SR, F_T]) + F_SR)`, unclamped.
pub fn fusion_forward(p: &Bound, f_sr: &Var, f_t: &Var, blocks: usize) -> Var {
    let h = p.conv("conv_in", &concat_channels(&[f_sr.clone(), f_t.clone()]), 1, PadMode::Zero);
    let h = p.conv("conv_out", &res_blocks(p, h, blocks), 1, PadMode::Zero);
    p.conv("rec", &add(&h, f_sr), 1, PadMode::Zero)
}

/// `[N, H, W, 3]` → `[N, H/s, W/s, 3]`, unclamped.
pub fn degrader_forward(cfg: &DegraderConfig, p: &Bound, img: &Var) -> Var {
    let n = stages_for(cfg.scale);
    let mut h = img.clone();
    for k in 0..n {
        h = p.conv(&format!("stage{k}"), &h, 2, PadMode::Replicate);
        if k + 1 < n {
            h = leaky_relu(&h, LEAKY_SLOPE);
        }
    }
    h
}

/// Unbounded critic scores, shape `[N]`.
pub fn critic_forward(cfg: &CriticConfig, p: &Bound, img: &Var) -> Var {
    let mut h = img.clone();
    for k in 0..cfg.stages {
        h = leaky_relu(&p.conv(&format!("stage{k}"), &h, 2, PadMode::Zero), LEAKY_SLOPE);
    }
    let [n, hh, ww, c] = h.value().dims4();
    let ones = Var::constant(Tensor::full(&[n, 1, hh * ww], 1.0 / (hh * ww) as f64));
    let pooled = reshape(&matmul(&ones, &reshape(&h, &[n, hh * ww, c]), false, false), &[1, n, c]);
    let w = reshape(p.get("head.w"), &[1, c, 1]);
    let score = add_bias(&matmul(&pooled, &w, false, false), p.get("head.b"));
    reshape(&score, &[n])
}

/// Smallest input side the critic accepts.
pub fn critic_min_size(cfg: &CriticConfig) -> usize {
    1 << cfg.stages
}

fn image_var(img: &ImageTensor) -> Result<Var> {
    if img.channels() != 3 {
        bail_arg!("networks take RGB images, got {} channels", img.channels());
    }
    Ok(Var::constant(img.to_tensor()))
}

pub fn upscale_features(lr: &ImageTensor, params: &NetworkParams) -> Result<FeatureMap> {
    let ArchConfig::Upscaler(cfg) = params.config else {
        params.expect_arch("upscaler")?;
        unreachable!()
    };
    let x = image_var(lr)?;
    let out = no_grad(|| upscaler_forward(&cfg, &params.bind(false), &x));
    Ok(FeatureMap::from_batch(out.value(), 0))
}

/// Reconstructs an image from upscaled and transferred features, clamped into `[0, 1]`.
pub fn fuse_reconstruct(f_sr: &FeatureMap, f_t: &FeatureMap, params: &NetworkParams) -> Result<ImageTensor> {
    let ArchConfig::Fusion(cfg) = params.config else {
        params.expect_arch("fusion")?;
        unreachable!()
    };
    if (f_sr.height(), f_sr.width()) != (f_t.height(), f_t.width()) {
        bail_arg!(
            "F_SR is {}x{} but F_T is {}x{}",
            f_sr.height(),
            f_sr.width(),
            f_t.height(),
            f_t.width()
        );
    }
    if f_sr.channels() != cfg.width || f_t.channels() != cfg.transfer_channels {
        return Err(Error::Configuration(format!(
            "fusion expects {}+{} channels, got {}+{}",
            cfg.width,
            cfg.transfer_channels,
            f_sr.channels(),
            f_t.channels()
        )));
    }
    let out = no_grad(|| {
        fusion_forward(&params.bind(false), &Var::constant(f_sr.to_tensor()), &Var::constant(f_t.to_tensor()), cfg.blocks)
    });
    ImageTensor::from_tensor(out.value(), 0)
}

pub fn degrade_net(img: &ImageTensor, params: &NetworkParams) -> Result<ImageTensor> {
    let ArchConfig::Degrader(cfg) = params.config else {
        params.expect_arch("degrader")?;
        unreachable!()
    };
    if !img.height().is_multiple_of(cfg.scale) || !img.width().is_multiple_of(cfg.scale) {
        bail_arg!("{}x{} image is not divisible by the degrader scale {}", img.height(), img.width(), cfg.scale);
    }
    let x = image_var(img)?;
    let out = no_grad(|| degrader_forward(&cfg, &params.bind(false), &x));
    ImageTensor::from_tensor(out.value(), 0)
}

pub fn discriminate(img: &ImageTensor, params: &NetworkParams) -> Result<f64> {
    let ArchConfig::Critic(cfg) = params.config else {
        params.expect_arch("critic")?;
        unreachable!()
    };
    let min = critic_min_size(&cfg);
    if img.height() < min || img.width() < min {
        bail_arg!("critic needs inputs of at least {min}x{min}, got {}x{}", img.height(), img.width());
    }
    let x = image_var(img)?;
    Ok(no_grad(|| critic_forward(&cfg, &params.bind(false), &x)).item())
}

const GENERATOR_ARCH: &str = "generator";

/// Upscaler and fusion head, trained and stored together.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub upscaler: NetworkParams,
    pub fusion: NetworkParams,
}

impl Generator {
    pub fn init(scale: usize, transfer_channels: usize, seed: u64) -> Result<Self> {
        let up = UpscalerConfig::new(scale);
        let fusion = FusionConfig { transfer_channels, ..FusionConfig::new(transfer_channels) };
        Self::with_configs(up, fusion, seed)
    }

    pub fn with_configs(up: UpscalerConfig, fusion: FusionConfig, seed: u64) -> Result<Self> {
        if up.width != fusion.width {
            return Err(Error::Configuration(format!(
                "upscaler width {} differs from fusion width {}",
                up.width, fusion.width
            )));
        }
        Ok(Self {
            upscaler: NetworkParams::init(ArchConfig::Upscaler(up), seed)?,
            fusion: NetworkParams::init(ArchConfig::Fusion(fusion), seed.wrapping_add(1))?,
        })
    }

    pub fn upscaler_config(&self) -> UpscalerConfig {
        match self.upscaler.config {
            ArchConfig::Upscaler(c) => c,
            _ => unreachable!("validated on construction"),
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        match self.fusion.config {
            ArchConfig::Fusion(c) => c,
            _ => unreachable!("validated on construction"),
        }
    }

    pub fn scale(&self) -> usize {
        self.upscaler_config().scale
    }

    /// Tensors of both parts under `upscaler/` and `fusion/` prefixes.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (prefix, p) in [("upscaler/", &self.upscaler), ("fusion/", &self.fusion)] {
            for (k, t) in &p.tensors {
                out.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        out
    }

    pub fn set_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in tensors {
            let (part, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Configuration(format!("unprefixed generator tensor `{name}`")))?;
            let target = match part {
                "upscaler" => &mut self.upscaler,
                "fusion" => &mut self.fusion,
                _ => return Err(Error::Configuration(format!("unknown generator part `{part}`"))),
            };
            target.tensors.insert(key.to_string(), t.clone());
        }
        self.upscaler.validate()?;
        self.fusion.validate()
    }

    /// Full forward pass on batches: LR `[N, h, w, 3]` and `F_T` `[N, s·h, s·w, C_T]`.
    pub fn forward(&self, up: &Bound, fusion: &Bound, lr: &Var, f_t: &Var) -> Var {
        let f_sr = upscaler_forward(&self.upscaler_config(), up, lr);
        fusion_forward(fusion, &f_sr, f_t, self.fusion_config().blocks)
    }

    pub fn to_container(&self) -> Container {
        Container {
            meta: serde_json::json!({
                "arch_id": GENERATOR_ARCH,
                "upscaler": self.upscaler.meta(),
                "fusion": self.fusion.meta(),
            }),
            tensors: self.tensors(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta.get("arch_id").and_then(|v| v.as_str()) != Some(GENERATOR_ARCH) {
            return Err(Error::Configuration(format!("expected generator parameters, got arch_id {}", c.meta["arch_id"])));
        }
        let mut parts: [BTreeMap<String, Tensor>; 2] = Default::default();
        for (name, t) in c.tensors {
            match name.split_once('/') {
                Some(("upscaler", k)) => parts[0].insert(k.to_string(), t),
                Some(("fusion", k)) => parts[1].insert(k.to_string(), t),
                _ => return Err(Error::Configuration(format!("unexpected generator tensor `{name}`"))),
            };
        }
        let [up, fu] = parts;
        let g = Self {
            upscaler: NetworkParams::from_meta(&c.meta["upscaler"], up)?,
            fusion: NetworkParams::from_meta(&c.meta["fusion"], fu)?,
        };
        g.upscaler.expect_arch("upscaler")?;
        g.fusion.expect_arch("fusion")?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_container(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(checkpoint::load(path)?)
    }
}
