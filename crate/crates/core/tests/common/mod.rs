#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refsr::features::FeatureMap;
use refsr::{ColorSpace, ImageTensor};
use refsr_autograd::{grad_values, no_grad, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(h, w, ColorSpace::Rgb, |_, _, _| r.random()).unwrap()
}

/// Values in `[lo, hi)`.
pub fn random_image_in(h: usize, w: usize, lo: f64, hi: f64, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(h, w, ColorSpace::Rgb, |_, _, _| r.random_range(lo..hi)).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

pub fn random_features(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    FeatureMap::new(h, w, c, random_tensor(&[h * w * c], seed).into_data()).unwrap()
}

#[allow(clippy::approx_constant)]
/// Smooth gradients plus seeded strokes and fine texture, loosely painting-like.
pub fn synthetic_painting(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    let base: [f64; 3] = [r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.2..0.8)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (r.random_range(0.02..0.4), r.random_range(0.02..0.4), r.random_range(0.0..6.28), r.random_range(0.02..0.12)))
        .collect();
    let grain: Vec<f64> = (0..h * w).map(|_| r.random_range(-0.04..0.04)).collect();
    ImageTensor::from_fn(h, w, ColorSpace::Rgb, |y, x, c| {
        let mut v = base[c];
        for (k, &(fy, fx, ph, amp)) in waves.iter().enumerate() {
            let phase = ph + c as f64 * 0.7 * (k % 2) as f64;
            v += amp * (fy * y as f64 + fx * x as f64 + phase).sin();
        }
        v + grain[y * w + x]
    })
    .unwrap()
}

/// Relative ℓ2 error between analytic and central-difference gradients of
/// the scalar `build(inputs)`, over all inputs.
pub fn gradient_error(build: &dyn Fn(&[Var]) -> Var, inputs: &[Tensor], h: f64) -> f64 {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let analytic = grad_values(&build(&vars), &vars);
    let eval = |ts: &[Tensor]| {
        no_grad(|| {
            let vs: Vec<Var> = ts.iter().cloned().map(Var::constant).collect();
            build(&vs).item()
        })
    };
    let (mut diff, mut norm) = (0.0, 0.0);
    for (which, a) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let n = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = a.data()[i];
            diff += (n - g).powi(2);
            norm += n * n + g * g;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}

/// Deterministic integer-hash image, reproducible outside Rust.
pub fn hash_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    ImageTensor::from_fn(h, w, ColorSpace::Rgb, |y, x, c| {
        let mut v = (y as u64).wrapping_mul(73856093)
            ^ (x as u64).wrapping_mul(19349663)
            ^ (c as u64).wrapping_mul(83492791)
            ^ seed.wrapping_mul(2654435761);
        v = v.wrapping_mul(0x9E3779B97F4A7C15);
        v ^= v >> 29;
        v = v.wrapping_mul(0xBF58476D1CE4E5B9);
        (v >> 40) as f64 / (1u64 << 24) as f64
    })
    .unwrap()
}

pub fn blend(a: &ImageTensor, b: &ImageTensor, mix: f64) -> ImageTensor {
    let (h, w, _) = a.dims();
    ImageTensor::from_fn(h, w, ColorSpace::Rgb, |y, x, c| (1.0 - mix) * a.get(y, x, c) + mix * b.get(y, x, c)).unwrap()
}

/// Exhaustive cosine search; the first maximum in row-major order wins.
pub fn brute_match(q: &FeatureMap, r: &FeatureMap, p: usize) -> Vec<(usize, usize)> {
    let patch = |m: &FeatureMap, y: usize, x: usize| -> Vec<f64> {
        (0..p).flat_map(|dy| (0..p).flat_map(move |dx| m.pixel(y + dy, x + dx).to_vec())).collect()
    };
    let mut out = Vec::new();
    for qy in 0..=q.height() - p {
        for qx in 0..=q.width() - p {
            let a = patch(q, qy, qx);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = ((0, 0), f64::NEG_INFINITY);
            for ry in 0..=r.height() - p {
                for rx in 0..=r.width() - p {
                    let b = patch(r, ry, rx);
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    let s = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
                    if s > best.1 {
                        best = ((ry, rx), s);
                    }
                }
            }
            out.push(best.0);
        }
    }
    out
}

/// A map whose pixels repeat with period `k`, so many reference patches tie exactly.
pub fn periodic_features(h: usize, w: usize, c: usize, k: usize, seed: u64) -> FeatureMap {
    let tile = random_features(k, k, c, seed);
    let data = (0..h).flat_map(|y| (0..w).flat_map(move |x| (0..c).map(move |ch| (y, x, ch)))).map(|(y, x, ch)| tile.get(y % k, x % k, ch));
    FeatureMap::new(h, w, c, data.collect()).unwrap()
}
