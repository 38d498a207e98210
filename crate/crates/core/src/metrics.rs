//! PSNR, SSIM, NIQE and the perceptual index, plus the evaluation table.
//!
//! Full-reference metrics run on BT.601 luminance of the whole image, without
//! border cropping.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{bail_arg, Error, Result};
use crate::imaging::{bicubic_resize, load_image, ColorSpace, ImageTensor};

fn luma(img: &ImageTensor) -> ImageTensor {
    match img.color_space() {
        ColorSpace::Luma => img.clone(),
        ColorSpace::Rgb => img.luminance(),
    }
}

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        bail_arg!("images differ in shape: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

/// `10·log10(1 / MSE)` on luminance; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let (ya, yb) = (luma(a), luma(b));
    let mse = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ya.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation of an `h×w` plane, keeping only fully covered positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Separable correlation with edge replication, same size as the input.
fn filter_replicate(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..w {
            rows[y * w + xo] =
                k.iter().enumerate().map(|(i, kv)| kv * x[y * w + clampi(xo as isize + i as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for yo in 0..h {
        for xo in 0..w {
            out[yo * w + xo] =
                k.iter().enumerate().map(|(i, kv)| kv * rows[clampi(yo as isize + i as isize - r, h) * w + xo]).sum();
        }
    }
    out
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5) lying inside the image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail_arg!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}");
    }
    let (ya, yb) = (luma(a), luma(b));
    let (x, y) = (ya.data(), yb.data());
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(usize) -> f64| filter_valid(&(0..h * w).map(f).collect::<Vec<_>>(), h, w, &k).0;
    let mu_x = prod(&|i| x[i]);
    let mu_y = prod(&|i| y[i]);
    let xx = prod(&|i| x[i] * x[i]);
    let yy = prod(&|i| y[i] * y[i]);
    let xy = prod(&|i| x[i] * y[i]);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let (vx, vy, cxy) = (xx[i] - mx * mx, yy[i] - my * my, xy[i] - mx * my);
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

pub fn perceptual_index(ma: f64, niqe_score: f64) -> f64 {
    0.5 * ((10.0 - ma) + niqe_score)
}

pub const NIQE_PATCH: usize = 96;
pub const NIQE_FEATURES: usize = 36;
const NIQE_SHARPNESS_FRACTION: f64 = 0.75;

/// Multivariate Gaussian fitted to natural-scene-statistics features of
/// pristine patches. The default value is unfitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub patch_size: usize,
    pub n_patches: usize,
    pub mean: Vec<f64>,
    /// Row-major `36×36` sample covariance.
    pub cov: Vec<f64>,
}

impl NiqeModel {
    pub fn is_fitted(&self) -> bool {
        self.n_patches > 0 && self.mean.len() == NIQE_FEATURES && self.cov.len() == NIQE_FEATURES * NIQE_FEATURES
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::checkpoint::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Configuration(format!("NIQE model not readable at {} ({e})", path.display())))?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Configuration(format!("NIQE model {}: {e}", path.display())))?;
        if !m.is_fitted() {
            return Err(Error::Configuration(format!("{} is not a fitted NIQE model", path.display())));
        }
        Ok(m)
    }
}

/// Luminance on a 0–255 scale as a plane.
fn plane255(img: &ImageTensor) -> (Vec<f64>, usize, usize) {
    let y = luma(img);
    (y.data().iter().map(|v| v * 255.0).collect(), y.height(), y.width())
}

/// Mean-subtracted contrast-normalized coefficients and the local deviation field.
fn mscn(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_kernel(7, 7.0 / 6.0);
    let mu = filter_replicate(x, h, w, &k);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mu_sq = filter_replicate(&sq, h, w, &k);
    let sigma: Vec<f64> = mu_sq.iter().zip(&mu).map(|(s, m)| (s - m * m).abs().sqrt()).collect();
    let coeffs = x.iter().zip(&mu).zip(&sigma).map(|((v, m), s)| (v - m) / (s + 1.0)).collect();
    (coeffs, sigma)
}

/// Shape grid 0.2..10 in steps of 0.001 with the GGD moment ratio
/// `Γ(1/α)Γ(3/α)/Γ(2/α)²` at each point.
fn alpha_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..9800)
            .map(|i| {
                let a = 0.2 + 0.001 * i as f64;
                (a, gamma(1.0 / a) * gamma(3.0 / a) / gamma(2.0 / a).powi(2))
            })
            .collect()
    })
}

fn closest_alpha(target: f64, f: impl Fn(f64) -> f64) -> f64 {
    alpha_table()
        .iter()
        .map(|&(a, ratio)| (a, (f(ratio) - target).abs()))
        .fold((0.2, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc })
        .0
}

/// Generalized Gaussian fit: (shape α, variance σ²).
fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if mean_abs == 0.0 {
        return (10.0, 0.0);
    }
    let rho = var / (mean_abs * mean_abs);
    (closest_alpha(rho, |r| r), var)
}

/// Asymmetric generalized Gaussian fit: (α, η, σ_l², σ_r²).
fn fit_aggd(x: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let sl = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let sr = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let n = x.len() as f64;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    if sl == 0.0 || sr == 0.0 || mean_sq == 0.0 {
        return [10.0, 0.0, sl * sl, sr * sr];
    }
    let g = sl / sr;
    let r_hat = mean_abs * mean_abs / mean_sq;
    let big_r = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = closest_alpha(big_r, |r| 1.0 / r);
    let eta = (sr - sl) * gamma(2.0 / alpha) / gamma(1.0 / alpha) * (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    [alpha, eta, sl * sl, sr * sr]
}

/// 18 features of one MSCN patch.
fn patch_features(m: &[f64], p: usize) -> Vec<f64> {
    let (alpha, var) = fit_ggd(m);
    let mut f = vec![alpha, var];
    let at = |y: usize, x: usize| m[y * p + x];
    let shifts: [(usize, usize, isize); 4] = [(0, 1, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)];
    for (dy, dx, anti) in shifts {
        let mut prods = Vec::with_capacity(p * p);
        for y in 0..p - dy {
            for x in 0..p - dx {
                let v = if anti == 1 { at(y, x + 1) * at(y + 1, x) } else { at(y, x) * at(y + dy, x + dx) };
                prods.push(v);
            }
        }
        f.extend_from_slice(&fit_aggd(&prods));
    }
    f
}

fn sub_plane(x: &[f64], w: usize, top: usize, left: usize, p: usize) -> Vec<f64> {
    (0..p).flat_map(|y| x[(top + y) * w + left..(top + y) * w + left + p].iter().copied()).collect()
}

/// Per-patch 36-dim features and per-patch sharpness.
fn image_features(img: &ImageTensor) -> Result<Vec<(Vec<f64>, f64)>> {
    let (h, w) = (img.height(), img.width());
    if h < NIQE_PATCH || w < NIQE_PATCH {
        bail_arg!("NIQE needs at least {NIQE_PATCH}x{NIQE_PATCH} pixels, got {h}x{w}");
    }
    let (ph, pw) = (h / NIQE_PATCH, w / NIQE_PATCH);
    let cropped = luma(img).crop(0, 0, ph * NIQE_PATCH, pw * NIQE_PATCH)?;
    let (x1, h1, w1) = plane255(&cropped);
    let (m1, s1) = mscn(&x1, h1, w1);
    let half = bicubic_resize(&cropped, 0.5)?;
    let (x2, h2, w2) = plane255(&half);
    let (m2, _) = mscn(&x2, h2, w2);
    let q = NIQE_PATCH / 2;
    let mut out = Vec::with_capacity(ph * pw);
    for i in 0..ph {
        for j in 0..pw {
            let mut f = patch_features(&sub_plane(&m1, w1, i * NIQE_PATCH, j * NIQE_PATCH, NIQE_PATCH), NIQE_PATCH);
            f.extend(patch_features(&sub_plane(&m2, w2, i * q, j * q, q), q));
            let sharp = sub_plane(&s1, w1, i * NIQE_PATCH, j * NIQE_PATCH, NIQE_PATCH).iter().sum::<f64>()
                / (NIQE_PATCH * NIQE_PATCH) as f64;
            out.push((f, sharp));
        }
    }
    Ok(out)
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    if rows.len() > 1 {
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= n - 1.0);
    }
    (mean, cov)
}

/// Fits the pristine model from sharp patches (sharpness above 0.75 of each
/// image's sharpest patch). Needs more than 36 selected patches.
pub fn fit_niqe(corpus: &[ImageTensor]) -> Result<NiqeModel> {
    let mut rows = Vec::new();
    for img in corpus {
        if img.height() < NIQE_PATCH || img.width() < NIQE_PATCH {
            log::warn!("skipping {}x{} image: smaller than one NIQE patch", img.height(), img.width());
            continue;
        }
        let feats = image_features(img)?;
        let top = feats.iter().map(|f| f.1).fold(0.0, f64::max);
        rows.extend(feats.into_iter().filter(|f| f.1 > NIQE_SHARPNESS_FRACTION * top && f.1 > 0.0).map(|f| f.0));
    }
    if rows.len() <= NIQE_FEATURES {
        bail_arg!(
            "insufficient patches to fit NIQE: {} sharp {NIQE_PATCH}x{NIQE_PATCH} patches from {} images, need at least {}",
            rows.len(),
            corpus.len(),
            NIQE_FEATURES + 1
        );
    }
    let (mean, cov) = mean_cov(&rows);
    Ok(NiqeModel { patch_size: NIQE_PATCH, n_patches: rows.len(), mean, cov })
}

/// Distance between the image's feature Gaussian and the pristine model.
pub fn niqe(img: &ImageTensor, model: &NiqeModel) -> Result<f64> {
    if !model.is_fitted() {
        return Err(Error::Configuration("NIQE model is not fitted; run fit-niqe first".into()));
    }
    let rows: Vec<Vec<f64>> = image_features(img)?.into_iter().map(|f| f.0).collect();
    let (mean, cov) = mean_cov(&rows);
    let d = NIQE_FEATURES;
    let diff = DVector::from_iterator(d, model.mean.iter().zip(&mean).map(|(a, b)| a - b));
    let pooled = (DMatrix::from_row_slice(d, d, &model.cov) + DMatrix::from_row_slice(d, d, &cov)) * 0.5;
    let pinv = pooled.pseudo_inverse(1e-12).map_err(|e| Error::Numeric { term: format!("NIQE covariance ({e})") })?;
    let q = (diff.transpose() * pinv * &diff)[(0, 0)];
    if !q.is_finite() {
        return Err(Error::Numeric { term: "NIQE distance".into() });
    }
    Ok(q.max(0.0).sqrt())
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub niqe: Option<f64>,
    pub ma: Option<f64>,
    pub pi: Option<f64>,
}

/// Finds `<id>_sr.<ext>` / `<id>_gt.<ext>` pairs in `dir`, sorted by id.
pub fn find_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut sr = HashMap::new();
    let mut gt = HashMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if let Some(id) = stem.strip_suffix("_sr") {
            sr.insert(id.to_string(), path.clone());
        } else if let Some(id) = stem.strip_suffix("_gt") {
            gt.insert(id.to_string(), path.clone());
        }
    }
    let mut pairs: Vec<_> = sr.into_iter().filter_map(|(id, s)| gt.remove(&id).map(|g| (id, s, g))).collect();
    pairs.sort();
    Ok(pairs)
}

/// Ma scores from a CSV with header `image_id,ma`.
pub fn read_ma_scores(path: &Path) -> Result<HashMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for rec in rdr.deserialize::<(String, f64)>() {
        let (id, ma) = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.insert(id, ma);
    }
    Ok(out)
}

pub fn evaluate_pairs(dir: &Path, model: Option<&NiqeModel>, ma: &HashMap<String, f64>) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (id, sr_path, gt_path) in find_pairs(dir)? {
        let sr = load_image(&sr_path)?;
        let gt = load_image(&gt_path)?;
        let niqe_score = match model {
            Some(m) if sr.height() >= NIQE_PATCH && sr.width() >= NIQE_PATCH => Some(niqe(&sr, m)?),
            _ => None,
        };
        let ma_score = ma.get(&id).copied();
        let pi = match (ma_score, niqe_score) {
            (Some(a), Some(n)) => Some(perceptual_index(a, n)),
            _ => None,
        };
        rows.push(EvalRow { psnr: psnr(&sr, &gt)?, ssim: ssim(&sr, &gt)?, niqe: niqe_score, ma: ma_score, pi, image_id: id });
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
    }
}

pub const TABLE_HEADER: [&str; 6] = ["image_id", "psnr", "ssim", "niqe", "ma", "pi"];

pub fn write_table(rows: &[EvalRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| Error::Format(format!("writing metrics table: {e}"));
    w.write_record(TABLE_HEADER).map_err(fail)?;
    for r in rows {
        w.write_record([r.image_id.clone(), cell(Some(r.psnr)), cell(Some(r.ssim)), cell(r.niqe), cell(r.ma), cell(r.pi)])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::Format(format!("writing metrics table: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernels_are_normalized_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
        assert!(k[5] > k[4]);
    }

    #[test]
    fn ggd_fit_recovers_laplacian_shape() {
        // Quantiles of a Laplacian (α = 1) with unit scale.
        let n = 20_000;
        let x: Vec<f64> = (1..n)
            .map(|i| {
                let u = i as f64 / n as f64 - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let (alpha, var) = fit_ggd(&x);
        assert!((alpha - 1.0).abs() < 0.02, "{alpha}");
        assert!((var - 2.0).abs() < 0.05, "{var}");
        let [a, eta, l, r] = fit_aggd(&x);
        assert!((a - 1.0).abs() < 0.02 && eta.abs() < 1e-6 && (l - r).abs() < 1e-6);
    }
}
