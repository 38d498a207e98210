//! Single-level orthonormal 2-D Haar transform.
//!
//! With `L = [1, 1]/√2` and `H = [-1, 1]/√2`, each band is a stride-2 valid
//! correlation with a 2×2 outer-product kernel whose first factor runs down
//! the rows and second factor across the columns:
//!
//! ```text
//! K_LL = ½[[ 1, 1], [ 1, 1]]    K_LH = ½[[-1, 1], [-1, 1]]
//! K_HL = ½[[-1,-1], [ 1, 1]]    K_HH = ½[[ 1,-1], [-1, 1]]
//! ```

use std::rc::Rc;

use refsr_autograd::{linear, LinearMap, Tensor, Var};

use crate::error::{bail_arg, Result};
use crate::imaging::{ColorSpace, ImageTensor};

/// The four half-resolution sub-bands, each shaped `[H/2, W/2, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletBands {
    pub fn shape(&self) -> [usize; 3] {
        match self.ll.shape() {
            &[h, w, c] => [h, w, c],
            s => panic!("band shape {s:?}"),
        }
    }

    fn iter(&self) -> [&Tensor; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    /// Sum of squares over all bands.
    pub fn energy(&self) -> f64 {
        self.iter().iter().map(|b| b.dot(b)).sum()
    }
}

/// Band coefficients of one 2×2 block `[[a, b], [c, d]]`.
#[inline]
fn analyze(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [
        0.5 * (a + b + c + d),
        0.5 * (-a + b - c + d),
        0.5 * (-a - b + c + d),
        0.5 * (a - b - c + d),
    ]
}

/// Inverse of [`analyze`] (its transpose, the kernels being orthonormal).
#[inline]
fn synthesize(ll: f64, lh: f64, hl: f64, hh: f64) -> [f64; 4] {
    [
        0.5 * (ll - lh - hl + hh),
        0.5 * (ll + lh - hl - hh),
        0.5 * (ll - lh + hl - hh),
        0.5 * (ll + lh + hl + hh),
    ]
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        bail_arg!("Haar transform needs positive even dimensions, got {h}x{w}");
    }
    Ok(())
}

/// Forward transform of `[N, H, W, C]` data; calls `sink(band, out_index, value)`.
fn forward_raw(data: &[f64], [n, h, w, c]: [usize; 4], mut sink: impl FnMut(usize, usize, f64)) {
    let (ho, wo) = (h / 2, w / 2);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| data[((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch];
                    let coeffs = analyze(at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                    let o = ((b * ho + y) * wo + x) * c + ch;
                    for (band, v) in coeffs.into_iter().enumerate() {
                        sink(band, o, v);
                    }
                }
            }
        }
    }
}

/// Inverse transform into `[N, H, W, C]` data from band accessors.
fn inverse_raw(bands: [&[f64]; 4], [n, h, w, c]: [usize; 4]) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    let o = ((b * ho + y) * wo + x) * c + ch;
                    let px = synthesize(bands[0][o], bands[1][o], bands[2][o], bands[3][o]);
                    for (k, v) in px.into_iter().enumerate() {
                        let (dy, dx) = (k / 2, k % 2);
                        out[((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch] = v;
                    }
                }
            }
        }
    }
    out
}

/// Splits an image into its four Haar sub-bands.
pub fn haar_forward(img: &ImageTensor) -> Result<WaveletBands> {
    let (h, w, c) = img.dims();
    check_even(h, w)?;
    let shape = [h / 2, w / 2, c];
    let len = shape.iter().product();
    let mut bands = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    forward_raw(img.data(), [1, h, w, c], |band, o, v| bands[band][o] = v);
    let [ll, lh, hl, hh] = bands.map(|b| Tensor::new(&shape, b));
    Ok(WaveletBands { ll, lh, hl, hh })
}

/// Exact reconstruction from the four sub-bands. The result is not clamped.
pub fn haar_inverse(bands: &WaveletBands) -> Result<Tensor> {
    let shape = bands.ll.shape();
    if shape.len() != 3 || bands.iter().iter().any(|b| b.shape() != shape) {
        bail_arg!(
            "wavelet bands must share one [h, w, c] shape, got {:?}",
            bands.iter().map(|b| b.shape().to_vec())
        );
    }
    let [h, w, c] = [shape[0] * 2, shape[1] * 2, shape[2]];
    let data = inverse_raw(bands.iter().map(|b| b.data()), [1, h, w, c]);
    Ok(Tensor::new(&[h, w, c], data))
}

/// The HH (diagonal detail) band as an `[H/2, W/2, C]` tensor with values in `[-1, 1]`.
pub fn extract_hh(img: &ImageTensor) -> Result<Tensor> {
    let (h, w, c) = img.dims();
    check_even(h, w)?;
    let mut hh = vec![0.0; (h / 2) * (w / 2) * c];
    forward_raw(img.data(), [1, h, w, c], |band, o, v| {
        if band == 3 {
            hh[o] = v;
        }
    });
    Ok(Tensor::new(&[h / 2, w / 2, c], hh))
}

/// Affine remap `v -> v/2 + 1/2` taking HH values from `[-1, 1]` into `[0, 1]`
/// before they are fed to a feature extractor.
pub const HH_REMAP_SCALE: f64 = 0.5;
pub const HH_REMAP_OFFSET: f64 = 0.5;

/// The HH band remapped into `[0, 1]` as an image.
pub fn hh_image(img: &ImageTensor) -> Result<ImageTensor> {
    let hh = extract_hh(img)?;
    let &[h, w, _] = hh.shape() else { unreachable!() };
    let data = hh.data().iter().map(|v| HH_REMAP_SCALE * v + HH_REMAP_OFFSET).collect();
    ImageTensor::new(h, w, img.color_space(), data)
}

/// HH extraction on an `[N, H, W, C]` batch as a linear operator.
pub struct HaarHh {
    in_shape: [usize; 4],
}

impl HaarHh {
    pub fn new(in_shape: [usize; 4]) -> Result<Self> {
        check_even(in_shape[1], in_shape[2])?;
        Ok(Self { in_shape })
    }

    fn out_shape(&self) -> [usize; 4] {
        let [n, h, w, c] = self.in_shape;
        [n, h / 2, w / 2, c]
    }
}

impl LinearMap for HaarHh {
    fn name(&self) -> &'static str {
        "haar_hh"
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let out_shape = self.out_shape();
        let mut hh = vec![0.0; out_shape.iter().product()];
        forward_raw(x.data(), self.in_shape, |band, o, v| {
            if band == 3 {
                hh[o] = v;
            }
        });
        Tensor::new(&out_shape, hh)
    }

    fn adjoint(&self, y: &Tensor) -> Tensor {
        let zeros = vec![0.0; y.numel()];
        let data = inverse_raw([&zeros, &zeros, &zeros, y.data()], self.in_shape);
        Tensor::new(&self.in_shape, data)
    }
}

/// Differentiable HH band of an `[N, H, W, C]` batch, remapped into `[0, 1]`.
pub fn hh_remapped_var(x: &Var) -> Result<Var> {
    let map = HaarHh::new(x.value().dims4())?;
    let hh = linear(x, Rc::new(map));
    Ok(refsr_autograd::ops::add_scalar(
        &refsr_autograd::ops::scale(&hh, HH_REMAP_SCALE),
        HH_REMAP_OFFSET,
    ))
}

/// Builds single-image bands from an `[h, w, c]` constant fill (used in tests and examples).
pub fn constant_bands(h: usize, w: usize, c: usize, ll: f64, lh: f64, hl: f64, hh: f64) -> WaveletBands {
    let shape = [h, w, c];
    WaveletBands {
        ll: Tensor::full(&shape, ll),
        lh: Tensor::full(&shape, lh),
        hl: Tensor::full(&shape, hl),
        hh: Tensor::full(&shape, hh),
    }
}

/// Interprets an `[h, w, c]` tensor with values in `[0, 1]` as an image.
pub fn tensor_to_image(t: &Tensor) -> Result<ImageTensor> {
    let &[h, w, c] = t.shape() else { bail_arg!("expected an [h, w, c] tensor, got {:?}", t.shape()) };
    let cs = match c {
        1 => ColorSpace::Luma,
        3 => ColorSpace::Rgb,
        _ => bail_arg!("an image needs 1 or 3 channels, got {c}"),
    };
    ImageTensor::new(h, w, cs, t.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, ColorSpace::Rgb, f).unwrap()
    }

    fn gray(rows: &[&[f64]]) -> ImageTensor {
        let (h, w) = (rows.len(), rows[0].len());
        ImageTensor::from_fn(h, w, ColorSpace::Luma, |y, x, _| rows[y][x]).unwrap()
    }

    #[test]
    fn single_block_coefficients() {
        let (a, b, c, d) = (0.1, 0.4, 0.7, 0.2);
        let bands = haar_forward(&gray(&[&[a, b], &[c, d]])).unwrap();
        assert!((bands.ll.item() - (a + b + c + d) / 2.0).abs() < 1e-15);

        // Horizontal step [[0, 1], [0, 1]].
        let bands = haar_forward(&gray(&[&[0.0, 1.0], &[0.0, 1.0]])).unwrap();
        assert!(bands.hh.item().abs() < 1e-15);
        assert!((bands.lh.item() - 1.0).abs() < 1e-15);
        assert!(bands.hl.item().abs() < 1e-15);
    }

    #[test]
    fn constant_image_has_only_ll() {
        let bands = haar_forward(&image(4, 6, |_, _, _| 1.0)).unwrap();
        assert!(bands.ll.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        for band in [&bands.lh, &bands.hl, &bands.hh] {
            assert!(band.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn inverse_examples() {
        let out = haar_inverse(&constant_bands(1, 1, 1, 2.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let zero = haar_inverse(&constant_bands(2, 3, 3, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(haar_forward(&image(3, 4, |_, _, _| 0.0)), Err(Error::Argument(_))));
        assert!(matches!(extract_hh(&image(4, 5, |_, _, _| 0.0)), Err(Error::Argument(_))));
        let mut bands = constant_bands(2, 2, 1, 0.0, 0.0, 0.0, 0.0);
        bands.hh = Tensor::zeros(&[2, 3, 1]);
        assert!(matches!(haar_inverse(&bands), Err(Error::Argument(_))));
    }

    #[test]
    fn hh_of_constant_is_zero_and_checkerboard_is_unit() {
        let hh = extract_hh(&image(6, 6, |_, _, _| 0.3)).unwrap();
        assert!(hh.data().iter().all(|&v| v.abs() < 1e-15));
        let checker = extract_hh(&image(8, 8, |y, x, _| ((y + x) % 2) as f64)).unwrap();
        assert!(checker.data().iter().all(|&v| (v.abs() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hh_ignores_brightness_shift() {
        let base = image(8, 8, |y, x, c| 0.1 + 0.6 * (((y * 7 + x * 3 + c) % 11) as f64 / 10.0));
        let shifted = base.map(|v| v + 0.2).unwrap();
        let (a, b) = (extract_hh(&base).unwrap(), extract_hh(&shifted).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn remapped_hh_matches_differentiable_path() {
        let img = image(6, 4, |y, x, c| ((y * 5 + x * 3 + c * 7) % 9) as f64 / 8.0);
        let direct = hh_image(&img).unwrap();
        let via_var = hh_remapped_var(&Var::constant(img.to_tensor())).unwrap();
        let expected = Tensor::new(&[1, 3, 2, 3], direct.data().to_vec());
        assert!(via_var.value().max_abs_diff(&expected) < 1e-15);
    }

    fn arb_image() -> impl Strategy<Value = ImageTensor> {
        (1usize..6, 1usize..6, prop::bool::ANY).prop_flat_map(|(hh, hw, rgb)| {
            let c = if rgb { 3 } else { 1 };
            prop::collection::vec(0.0f64..=1.0, 4 * hh * hw * c).prop_map(move |data| {
                let cs = if rgb { ColorSpace::Rgb } else { ColorSpace::Luma };
                ImageTensor::new(2 * hh, 2 * hw, cs, data).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_energy_and_bounds(img in arb_image()) {
            let bands = haar_forward(&img).unwrap();
            let back = haar_inverse(&bands).unwrap();
            let err = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-6);
            let e_in: f64 = img.data().iter().map(|v| v * v).sum();
            prop_assert!((bands.energy() - e_in).abs() <= 1e-5 * e_in.max(1e-12));
            prop_assert!(bands.ll.data().iter().all(|v| v.abs() <= 2.0 + 1e-12));
            for band in [&bands.lh, &bands.hl, &bands.hh] {
                prop_assert!(band.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
            }
        }

        #[test]
        fn linearity(x in arb_image(), a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let (h, w, _) = x.dims();
            let y = ImageTensor::from_fn(h, w, x.color_space(), |r, c, k| {
                (((r * 31 + c * 17 + k * 7) as u64 + seed) % 97) as f64 / 96.0
            }).unwrap();
            // a·x + b·y leaves [0, 1], so combine coefficients instead of images.
            let (fx, fy) = (haar_forward(&x).unwrap(), haar_forward(&y).unwrap());
            let combo: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
            let map = HaarHh::new([1, h, w, x.channels()]).unwrap();
            let hh = map.apply(&Tensor::new(&[1, h, w, x.channels()], combo));
            let expected: Vec<f64> = fx.hh.data().iter().zip(fy.hh.data()).map(|(p, q)| a * p + b * q).collect();
            let err = hh.data().iter().zip(&expected).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-6);
        }

        #[test]
        fn synthesis_is_the_adjoint(x in arb_image(), seed in 0u64..1000) {
            let bands = haar_forward(&x).unwrap();
            let [h, w, c] = bands.shape();
            let probe = |k: u64| Tensor::new(&[h, w, c], (0..h * w * c).map(|i| {
                ((i as u64 * 2654435761 + seed * 97 + k * 13) % 1000) as f64 / 500.0 - 1.0
            }).collect());
            let y = WaveletBands { ll: probe(0), lh: probe(1), hl: probe(2), hh: probe(3) };
            let lhs: f64 = bands.ll.dot(&y.ll) + bands.lh.dot(&y.lh) + bands.hl.dot(&y.hl) + bands.hh.dot(&y.hh);
            let adj = haar_inverse(&y).unwrap();
            let rhs: f64 = x.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }
    }
}
