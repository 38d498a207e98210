mod common;

use common::*;
use refsr::features::{extract_pyramid, FeatureExtractor, FeatureMap};
use refsr::losses::*;
use refsr::matching::{match_features_with, MatchConfig};
use refsr::networks::{degrader_forward, ArchConfig, CriticConfig, DegraderConfig, NetworkParams};
use refsr::{Error, ImageTensor};
use refsr_autograd::ops::{mul, sum};
use refsr_autograd::{grad_values, no_grad, Tensor, Var};

fn small_extractor() -> FeatureExtractor {
    FeatureExtractor::fallback(5, &[4, 6]).unwrap()
}

#[test]
fn reconstruction_examples_and_oracle() {
    let a = random_image_in(6, 5, 0.0, 0.9, 1);
    assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 0.1).unwrap();
    assert!((loss_rec(&shifted, &a).unwrap() - 0.1).abs() < 1e-12);

    let b = random_image(6, 5, 2);
    let brute: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64;
    assert!((loss_rec(&a, &b).unwrap() - brute).abs() < 1e-9);
    assert!(matches!(loss_rec(&a, &random_image(5, 5, 3)), Err(Error::Argument(_))));
}

#[test]
fn perceptual_loss_matches_per_map_oracle() {
    let ex = FeatureExtractor::fallback(2, &[8, 8, 8, 8]).unwrap();
    let a = random_image(16, 16, 4);
    let b = random_image(16, 16, 5);
    assert_eq!(loss_per(&a, &a, &ex).unwrap(), 0.0);
    let value = loss_per(&a, &b, &ex).unwrap();
    assert!(value >= 0.0);

    let feats = |img: &ImageTensor| {
        let v = no_grad(|| ex.perceptual(&Var::constant(img.to_tensor())).unwrap());
        FeatureMap::from_batch(v.value(), 0)
    };
    let (fa, fb) = (feats(&a), feats(&b));
    let (h, w, c) = fa.dims();
    let mut acc = 0.0;
    for ch in 0..c {
        let mut ss = 0.0;
        for y in 0..h {
            for x in 0..w {
                ss += (fa.get(y, x, ch) - fb.get(y, x, ch)).powi(2);
            }
        }
        acc += (ss / (h * w) as f64).sqrt();
    }
    assert!((value - acc / c as f64).abs() < 1e-6, "{value} vs {}", acc / c as f64);
}

/// HH band by explicit 2×2 blocks.
fn brute_hh_image(img: &ImageTensor) -> ImageTensor {
    let (h, w, _) = img.dims();
    ImageTensor::from_fn(h / 2, w / 2, img.color_space(), |y, x, c| {
        let a = img.get(2 * y, 2 * x, c);
        let b = img.get(2 * y, 2 * x + 1, c);
        let cc = img.get(2 * y + 1, 2 * x, c);
        let d = img.get(2 * y + 1, 2 * x + 1, c);
        0.5 * ((a - b - cc + d) / 2.0) + 0.5
    })
    .unwrap()
}

fn brute_gram(f: &FeatureMap) -> Vec<f64> {
    let (h, w, c) = f.dims();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            for y in 0..h {
                for x in 0..w {
                    g[i * c + j] += f.get(y, x, i) * f.get(y, x, j);
                }
            }
            g[i * c + j] /= (h * w) as f64;
        }
    }
    g
}

#[test]
fn texture_loss_composes_module_oracles() {
    let ex = FeatureExtractor::fallback(1, &[16, 32, 64, 128]).unwrap();
    let top = 3;
    let sr = random_image(16, 16, 6);
    let reference = random_image(16, 16, 7);
    let ref_pyr = extract_pyramid(&reference, &[1, 3], top, &ex).unwrap();
    let query = extract_pyramid(&random_image(16, 16, 8), &[1], top, &ex).unwrap();
    let m = match_features_with(query.level(1).unwrap(), ref_pyr.level(1).unwrap(), &MatchConfig::default(), 1).unwrap();
    let weights = LossWeights { lambda_l: Some(vec![0.7]), ..LossWeights::default() };
    let value = loss_tex_wavelet(&sr, &ref_pyr, &m, &weights, &ex, &[3]).unwrap();

    let target = brute_gram(&refsr::matching::transfer_at_level(&ref_pyr, &m, 3).unwrap().data);
    let feats = extract_pyramid(&brute_hh_image(&sr), &[3], top, &ex).unwrap();
    let g = brute_gram(feats.level(3).unwrap());
    let rms = (g.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
    assert!((value - 0.7 * rms).abs() < 1e-6, "{value} vs {}", 0.7 * rms);

    let zero = LossWeights { lambda_l: Some(vec![0.0]), ..LossWeights::default() };
    assert_eq!(loss_tex_wavelet(&sr, &ref_pyr, &m, &zero, &ex, &[3]).unwrap(), 0.0);
    assert!(matches!(loss_tex_wavelet(&sr, &ref_pyr, &m, &weights, &ex, &[0]), Err(Error::Argument(_))));
}

#[test]
fn texture_loss_vanishes_on_self_transfer() {
    let ex = FeatureExtractor::fallback(3, &[16, 32, 64, 128]).unwrap();
    let sr = random_image(32, 32, 9);
    let hh = brute_hh_image(&sr);
    let pyr = extract_pyramid(&hh, &[1, 2, 3], 3, &ex).unwrap();
    let m = match_features_with(pyr.level(1).unwrap(), pyr.level(1).unwrap(), &MatchConfig::default(), 1).unwrap();
    let v = loss_tex_wavelet(&sr, &pyr, &m, &LossWeights::default(), &ex, &[1, 2, 3]).unwrap();
    assert!(v.abs() < 1e-9, "{v}");
}

#[test]
fn texture_loss_ignores_brightness_offsets() {
    let ex = FeatureExtractor::fallback(4, &[16, 32, 64, 128]).unwrap();
    let sr = random_image_in(32, 32, 0.2, 0.7, 10);
    let brighter = sr.map(|v| v + 0.2).unwrap();
    let reference = random_image(32, 32, 11);
    let pyr = extract_pyramid(&reference, &[1, 2, 3], 3, &ex).unwrap();
    let m = match_features_with(pyr.level(1).unwrap(), pyr.level(1).unwrap(), &MatchConfig::default(), 1).unwrap();
    let w = LossWeights::default();
    let a = loss_tex_wavelet(&sr, &pyr, &m, &w, &ex, &[1, 2, 3]).unwrap();
    let b = loss_tex_wavelet(&brighter, &pyr, &m, &w, &ex, &[1, 2, 3]).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn texture_reference_variants() {
    let img = random_image(8, 6, 12);
    assert_eq!(texture_reference(&img, TextureTarget::RawReference).unwrap(), img);
    let hf = texture_reference(&img, TextureTarget::HighFrequencyReference).unwrap();
    assert_eq!(hf.dims(), (8, 6, 3));
    let hh = brute_hh_image(&img);
    assert!((hf.get(5, 3, 1) - hh.get(2, 1, 1)).abs() < 1e-12);
}

#[test]
fn degradation_loss_contracts() {
    let cfg = DegraderConfig { scale: 4, width: 4 };
    let mut constant = NetworkParams::zeros(ArchConfig::Degrader(cfg)).unwrap();
    constant.tensors.get_mut("stage1.b").unwrap().data_mut().copy_from_slice(&[0.3, 0.5, 0.7]);
    let sr = random_image(8, 8, 13);
    let target = ImageTensor::from_fn(2, 2, refsr::ColorSpace::Rgb, |_, _, c| [0.3, 0.5, 0.7][c]).unwrap();
    assert_eq!(loss_deg(&sr, &target, &constant).unwrap(), 0.0);
    let lr = random_image(2, 2, 14);
    assert!((loss_deg(&sr, &lr, &constant).unwrap() - loss_rec(&target, &lr).unwrap()).abs() < 1e-15);

    let d = NetworkParams::init(ArchConfig::Degrader(cfg), 15).unwrap();
    let down = no_grad(|| degrader_forward(&cfg, &d.bind(false), &Var::constant(sr.to_tensor())));
    let brute: f64 = down.value().data().iter().zip(lr.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0;
    assert!((loss_deg(&sr, &lr, &d).unwrap() - brute).abs() < 1e-9);

    // Frozen: gradients reach the image but the degrader is untouched.
    let before = d.clone();
    let x = Var::param(sr.to_tensor());
    let g = grad_values(&deg_var(&x, &Var::constant(lr.to_tensor()), &d).unwrap(), &[x]);
    assert!(g[0].data().iter().any(|&v| v != 0.0));
    assert_eq!(d, before);
    assert!(matches!(loss_deg(&sr, &random_image(3, 3, 0), &d), Err(Error::Argument(_))));
}

#[test]
fn adversarial_contracts() {
    let c = 0.37;
    let constant = |x: &Var| Var::constant(Tensor::full(&[x.shape()[0]], c));
    let sr = Var::constant(random_image(8, 8, 16).to_tensor());
    let gt = Var::constant(random_image(8, 8, 17).to_tensor());
    assert!((adv_g_var(&sr, &constant).item() + c).abs() < 1e-15);
    let parts = adv_d_var(&constant, &gt, &sr, 10.0, &[0.5]).unwrap();
    assert_eq!(parts.data_term.item(), 0.0);

    let critic = NetworkParams::init(ArchConfig::Critic(CriticConfig { stages: 3, base_width: 4 }), 18).unwrap();
    let imgs = vec![random_image(8, 8, 19), random_image(8, 8, 20)];
    let same = loss_adv_d(&imgs, &imgs, &critic, 0.0, &[0.3, 0.8]).unwrap();
    assert_eq!(same, 0.0);

    // A linear critic with a unit-norm direction is exactly 1-Lipschitz.
    let u = random_tensor(&[1, 8, 8, 3], 21);
    let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = Var::constant(u.map(|v| v / norm));
    let linear = move |x: &Var| sum(&mul(x, &u)).reshape_scalar();
    let gp = gradient_penalty(&linear, &gt, &sr, &[0.25]).unwrap();
    assert!(gp.item().abs() < 1e-12, "{}", gp.item());
}

trait ScalarShape {
    fn reshape_scalar(&self) -> Var;
}

impl ScalarShape for Var {
    fn reshape_scalar(&self) -> Var {
        refsr_autograd::ops::reshape(self, &[1])
    }
}

#[test]
fn total_loss_weights() {
    let w = LossWeights::default();
    assert_eq!(total_loss(&LossTerms::default(), &w).unwrap().total, 0.0);
    let unit = |f: fn(&mut LossTerms)| {
        let mut t = LossTerms::default();
        f(&mut t);
        total_loss(&t, &w).unwrap().total
    };
    assert_eq!(unit(|t| t.rec = 1.0), 1.0);
    assert_eq!(unit(|t| t.tex = 1.0), 1e-4);
    assert_eq!(unit(|t| t.deg = 1.0), 1.0);
    assert_eq!(unit(|t| t.per = 1.0), 1e-4);
    assert_eq!(unit(|t| t.adv = 1.0), 1e-6);

    let terms = LossTerms { rec: 0.2, tex: 30.0, deg: 0.05, per: 4.0, adv: -7.0 };
    let r = total_loss(&terms, &w).unwrap();
    let expect = 0.2 + 30.0e-4 + 0.05 + 4.0e-4 - 7.0e-6;
    assert!(((r.total - expect) / expect).abs() < 1e-9);
    assert_eq!((r.rec, r.tex, r.adv), (0.2, 30.0, -7.0));

    match total_loss(&LossTerms { per: f64::NAN, ..terms }, &w) {
        Err(Error::Numeric { term }) => assert_eq!(term, "per"),
        other => panic!("{other:?}"),
    }
    assert!(LossWeights { w_adv: -1.0, ..w.clone() }.validate().is_err());
    assert_eq!(w.lambdas(3).unwrap(), vec![1.0 / 3.0; 3]);
}

#[test]
fn gradient_checks_on_tiny_inputs() {
    let sr = random_image_in(4, 4, 0.1, 0.9, 30).to_tensor();
    let gt = random_image_in(4, 4, 0.1, 0.9, 31).to_tensor();

    let e = gradient_error(&|v| rec_var(&v[0], &v[1]).unwrap(), &[sr.clone(), gt.clone()], 1e-6);
    assert!(e < 1e-4, "rec {e:e}");

    let ex = small_extractor();
    let e = gradient_error(&|v| per_var(&v[0], &v[1], &ex).unwrap(), &[sr.clone(), gt.clone()], 1e-6);
    assert!(e < 1e-4, "per {e:e}");

    let target = random_tensor(&[1, 4, 4], 32);
    let levels = [TextureLevel { level: 3, lambda: 1.0, target }];
    let e = gradient_error(&|v| tex_var(&v[0], &levels, 3, &ex).unwrap(), std::slice::from_ref(&sr), 1e-6);
    assert!(e < 1e-4, "tex {e:e}");

    let deg = NetworkParams::init(ArchConfig::Degrader(DegraderConfig { scale: 2, width: 4 }), 33).unwrap();
    let lr = Var::constant(random_image(2, 2, 34).to_tensor());
    let e = gradient_error(&|v| deg_var(&v[0], &lr, &deg).unwrap(), std::slice::from_ref(&sr), 1e-6);
    assert!(e < 1e-4, "deg {e:e}");

    let ccfg = CriticConfig { stages: 2, base_width: 4 };
    let critic = NetworkParams::init(ArchConfig::Critic(ccfg), 35).unwrap();
    let names: Vec<String> = critic.tensors.keys().cloned().collect();
    let mut inputs = vec![gt.clone(), sr.clone()];
    inputs.extend(critic.tensors.values().cloned());
    let e = gradient_error(
        &|v| {
            let bound: std::collections::BTreeMap<String, Var> = names.iter().cloned().zip(v[2..].iter().cloned()).collect();
            let p = refsr::networks::Bound::from_vars(bound);
            let d = move |x: &Var| refsr::networks::critic_forward(&ccfg, &p, x);
            gradient_penalty(&d, &v[0], &v[1], &[0.4]).unwrap()
        },
        &inputs,
        1e-6,
    );
    assert!(e < 1e-4, "gradient penalty {e:e}");
}
