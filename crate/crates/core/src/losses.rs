//! Training objectives. The `*_var` functions build differentiable graphs on
//! `[N, H, W, C]` batches; the remaining functions evaluate single images.
//!
//! ℓ1 terms are means over elements and Frobenius terms are root-mean-square
//! over entries, so weights do not depend on tile size.

use std::rc::Rc;

use refsr_autograd::ops::{abs, add, add_scalar, mean, mul_const, reshape, scale, square, sqrt_eps, sub, sum_per_sample};
use refsr_autograd::{grad, matmul, no_grad, GradModeGuard, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::features::{gram, gram_var, FeatureExtractor, FeaturePyramid, GramMatrix};
use crate::imaging::ImageTensor;
use crate::matching::{transfer_at_level, MatchMap};
use crate::networks::{degrader_forward, ArchConfig, NetworkParams};
use crate::wavelet::{hh_image, hh_remapped_var};

/// Offset keeping square roots differentiable at zero.
const SQRT_EPS: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_tex: f64,
    pub w_deg: f64,
    pub w_per: f64,
    pub w_adv: f64,
    /// Per-level texture weights in ascending level order; `None` means
    /// `1 / |levels|` for every level.
    pub lambda_l: Option<Vec<f64>>,
    pub gp_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_rec: 1.0, w_tex: 1e-4, w_deg: 1.0, w_per: 1e-4, w_adv: 1e-6, lambda_l: None, gp_coef: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("w_rec", self.w_rec),
            ("w_tex", self.w_tex),
            ("w_deg", self.w_deg),
            ("w_per", self.w_per),
            ("w_adv", self.w_adv),
            ("gp_coef", self.gp_coef),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Configuration(format!("loss weight {name} must be finite and ≥ 0, got {v}")));
            }
        }
        if let Some(l) = &self.lambda_l {
            if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Configuration(format!("lambda_l entries must be finite and ≥ 0, got {l:?}")));
            }
        }
        Ok(())
    }

    /// Texture weights for `n` levels.
    pub fn lambdas(&self, n: usize) -> Result<Vec<f64>> {
        match &self.lambda_l {
            None => Ok(vec![1.0 / n as f64; n]),
            Some(l) if l.len() == n => Ok(l.clone()),
            Some(l) => Err(Error::Configuration(format!("lambda_l has {} entries for {n} texture levels", l.len()))),
        }
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub tex: f64,
    pub deg: f64,
    pub per: f64,
    pub adv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub tex: f64,
    pub deg: f64,
    pub per: f64,
    pub adv: f64,
    pub total: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let named = [("rec", terms.rec), ("tex", terms.tex), ("deg", terms.deg), ("per", terms.per), ("adv", terms.adv)];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric { term: (*name).to_string() });
    }
    let total = weights.w_rec * terms.rec
        + weights.w_tex * terms.tex
        + weights.w_deg * terms.deg
        + weights.w_per * terms.per
        + weights.w_adv * terms.adv;
    if !total.is_finite() {
        return Err(Error::Numeric { term: "total".into() });
    }
    Ok(LossReport { rec: terms.rec, tex: terms.tex, deg: terms.deg, per: terms.per, adv: terms.adv, total })
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail_arg!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

/// Mean absolute difference.
pub fn rec_var(sr: &Var, gt: &Var) -> Result<Var> {
    same_shape(sr, gt, "reconstruction loss")?;
    Ok(mean(&abs(&sub(sr, gt))))
}

/// Per-position RMS of each `[N, H, W, C]` channel map, shape `[N, 1, C]`.
fn channel_rms(x: &Var) -> Var {
    let [n, h, w, c] = x.value().dims4();
    let ones = Var::constant(Tensor::full(&[n, 1, h * w], 1.0 / (h * w) as f64));
    sqrt_eps(&matmul(&ones, &reshape(&square(x), &[n, h * w, c]), false, false), SQRT_EPS)
}

/// Mean over feature maps and samples of the RMS difference at the perceptual layer.
pub fn per_var(sr: &Var, gt: &Var, extractor: &FeatureExtractor) -> Result<Var> {
    same_shape(sr, gt, "perceptual loss")?;
    let a = extractor.perceptual(sr)?;
    let b = extractor.perceptual(gt)?;
    Ok(mean(&channel_rms(&sub(&a, &b))))
}

/// RMS over the entries of each sample's `C×C` difference, averaged over samples.
fn gram_distance(g: &Var, target: &Var) -> Var {
    let c = g.shape()[1];
    let per_sample = scale(&sum_per_sample(&square(&sub(g, target))), 1.0 / (c * c) as f64);
    mean(&sqrt_eps(&per_sample, SQRT_EPS))
}

/// Target Grams for the texture loss at one level, `[N, C, C]`.
#[derive(Clone, Debug)]
pub struct TextureLevel {
    pub level: usize,
    pub lambda: f64,
    pub target: Tensor,
}

/// `Σ_l λ_l · RMS(Gr(φ^l(HH(I_SR))) − target_l)` over the given levels of a
/// pyramid topped at `top_level`.
pub fn tex_var(sr: &Var, levels: &[TextureLevel], top_level: usize, extractor: &FeatureExtractor) -> Result<Var> {
    let Some(lowest) = levels.iter().map(|l| l.level).min() else { bail_arg!("no texture levels given") };
    if levels.iter().any(|l| l.level > top_level || l.level + 2 < top_level) {
        bail_arg!("texture levels must lie in {}..={top_level}", top_level.saturating_sub(2));
    }
    let hh = hh_remapped_var(sr)?;
    let taps = extractor.taps(&hh, top_level - lowest, false)?;
    let mut acc: Option<Var> = None;
    for lv in levels.iter().filter(|l| l.lambda != 0.0) {
        let g = gram_var(&taps.depths[top_level - lv.level]);
        if g.shape() != lv.target.shape() {
            bail_arg!("level {} Gram is {:?} but target is {:?}", lv.level, g.shape(), lv.target.shape());
        }
        let term = scale(&gram_distance(&g, &Var::constant(lv.target.clone())), lv.lambda);
        acc = Some(match acc {
            Some(a) => add(&a, &term),
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| Var::constant(Tensor::scalar(0.0))))
}

/// Grams of the transferred reference features `F_T^l` for each level.
pub fn transferred_grams(ref_pyramid: &FeaturePyramid, m: &MatchMap, levels: &[usize]) -> Result<Vec<GramMatrix>> {
    let top = ref_pyramid.top_level;
    levels
        .iter()
        .map(|&l| {
            if l > top || l + 2 < top {
                bail_arg!("texture level {l} outside the transferable range {}..={top}", top.saturating_sub(2));
            }
            Ok(gram(&transfer_at_level(ref_pyramid, m, l)?.data))
        })
        .collect()
}

/// Mean absolute difference between the frozen degrader's output and the LR input.
pub fn deg_var(sr: &Var, lr: &Var, degrader: &NetworkParams) -> Result<Var> {
    let ArchConfig::Degrader(cfg) = degrader.config else {
        degrader.expect_arch("degrader")?;
        unreachable!()
    };
    let [_, h, w, _] = sr.value().dims4();
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        bail_arg!("{h}x{w} output is not divisible by the degrader scale {}", cfg.scale);
    }
    let down = degrader_forward(&cfg, &degrader.bind(false), sr);
    same_shape(&down, lr, "degradation loss")?;
    Ok(mean(&abs(&sub(&down, lr))))
}

/// `−mean D(I_SR)`.
pub fn adv_g_var(sr: &Var, critic: &dyn Fn(&Var) -> Var) -> Var {
    scale(&mean(&critic(sr)), -1.0)
}

/// Critic objective parts.
pub struct CriticLoss {
    /// `mean D(I_SR) − mean D(I_GT)`.
    pub data_term: Var,
    pub penalty: Var,
    /// `data_term + gp_coef · penalty`.
    pub total: Var,
}

/// Interpolates per sample, `ε_i·gt_i + (1 − ε_i)·sr_i`.
fn interpolate(gt: &Var, sr: &Var, eps: &[f64]) -> Result<Var> {
    let n = gt.shape()[0];
    if eps.len() != n {
        bail_arg!("need one interpolation weight per sample ({n}), got {}", eps.len());
    }
    let per = gt.value().numel() / n;
    let weights: Vec<f64> = eps.iter().flat_map(|&e| std::iter::repeat_n(e, per)).collect();
    let e = Rc::new(Tensor::new(gt.shape(), weights.clone()));
    let one_minus = Rc::new(Tensor::new(gt.shape(), weights.iter().map(|w| 1.0 - w).collect()));
    Ok(add(&mul_const(gt, e), &mul_const(sr, one_minus)))
}

/// `mean_i (‖∇_x̂ D(x̂_i)‖₂ − 1)²` on per-sample interpolates.
pub fn gradient_penalty(critic: &dyn Fn(&Var) -> Var, gt: &Var, sr: &Var, eps: &[f64]) -> Result<Var> {
    same_shape(gt, sr, "gradient penalty")?;
    // The penalty is itself a gradient, so it needs a graph even under `no_grad`.
    let _mode = GradModeGuard::new(true);
    let x_hat = interpolate(gt, sr, eps)?;
    // Gradients w.r.t. an interior node need it to be part of a graph.
    let x_hat = if x_hat.requires_grad() { x_hat } else { Var::param(x_hat.value().clone()) };
    let d = critic(&x_hat);
    let g = grad(&d, std::slice::from_ref(&x_hat), true).remove(0);
    let norm = sqrt_eps(&sum_per_sample(&square(&g)), SQRT_EPS);
    Ok(mean(&square(&add_scalar(&norm, -1.0))))
}

pub fn adv_d_var(
    critic: &dyn Fn(&Var) -> Var,
    gt: &Var,
    sr: &Var,
    gp_coef: f64,
    eps: &[f64],
) -> Result<CriticLoss> {
    same_shape(gt, sr, "critic loss")?;
    let data_term = sub(&mean(&critic(sr)), &mean(&critic(gt)));
    let penalty = gradient_penalty(critic, gt, sr, eps)?;
    let total = add(&data_term, &scale(&penalty, gp_coef));
    Ok(CriticLoss { data_term, penalty, total })
}

fn image_var(img: &ImageTensor) -> Var {
    Var::constant(img.to_tensor())
}

pub fn loss_rec(sr: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    no_grad(|| rec_var(&image_var(sr), &image_var(gt))).map(|v| v.item())
}

pub fn loss_per(sr: &ImageTensor, gt: &ImageTensor, extractor: &FeatureExtractor) -> Result<f64> {
    no_grad(|| per_var(&image_var(sr), &image_var(gt), extractor)).map(|v| v.item())
}

/// Texture loss of one image against the transferred reference features
/// at `levels`, weighted by `weights.lambda_l`.
pub fn loss_tex_wavelet(
    sr: &ImageTensor,
    ref_pyramid: &FeaturePyramid,
    m: &MatchMap,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    levels: &[usize],
) -> Result<f64> {
    let lambdas = weights.lambdas(levels.len())?;
    let grams = transferred_grams(ref_pyramid, m, levels)?;
    let targets: Vec<TextureLevel> = levels
        .iter()
        .zip(lambdas)
        .zip(grams)
        .map(|((&level, lambda), g)| TextureLevel { level, lambda, target: g.to_tensor() })
        .collect();
    no_grad(|| tex_var(&image_var(sr), &targets, ref_pyramid.top_level, extractor)).map(|v| v.item())
}

pub fn loss_deg(sr: &ImageTensor, lr: &ImageTensor, degrader: &NetworkParams) -> Result<f64> {
    no_grad(|| deg_var(&image_var(sr), &image_var(lr), degrader)).map(|v| v.item())
}

fn critic_closure(critic: &NetworkParams) -> Result<impl Fn(&Var) -> Var> {
    let ArchConfig::Critic(cfg) = critic.config else {
        critic.expect_arch("critic")?;
        unreachable!()
    };
    let bound = critic.bind(false);
    Ok(move |x: &Var| crate::networks::critic_forward(&cfg, &bound, x))
}

pub fn loss_adv_g(sr: &[ImageTensor], critic: &NetworkParams) -> Result<f64> {
    let d = critic_closure(critic)?;
    let x = Var::constant(ImageTensor::stack(sr)?);
    Ok(no_grad(|| adv_g_var(&x, &d)).item())
}

/// Critic loss with gradient penalty; `eps` holds one interpolation weight per sample.
pub fn loss_adv_d(gt: &[ImageTensor], sr: &[ImageTensor], critic: &NetworkParams, gp_coef: f64, eps: &[f64]) -> Result<f64> {
    let d = critic_closure(critic)?;
    let g = Var::constant(ImageTensor::stack(gt)?);
    let s = Var::constant(ImageTensor::stack(sr)?);
    Ok(adv_d_var(&d, &g, &s, gp_coef, eps)?.total.item())
}

/// Which reference image the texture-loss targets are transferred from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureTarget {
    /// Features of the reference itself.
    #[default]
    RawReference,
    /// Features of the reference's remapped HH band, replicated back to full size.
    HighFrequencyReference,
}

/// The image whose pyramid supplies `F_T^l` for the texture loss.
pub fn texture_reference(reference: &ImageTensor, target: TextureTarget) -> Result<ImageTensor> {
    match target {
        TextureTarget::RawReference => Ok(reference.clone()),
        TextureTarget::HighFrequencyReference => {
            let hh = hh_image(reference)?;
            let (h, w, c) = hh.dims();
            ImageTensor::from_fn(2 * h, 2 * w, hh.color_space(), |y, x, k| hh.data()[((y / 2) * w + x / 2) * c + k])
        }
    }
}
