//! Image I/O, bicubic resampling and the fixed degradation operators used to
//! build training and matching inputs.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageError, Luma, Rgb};
use refsr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    Luma,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Luma => 1,
        }
    }
}

/// An `H×W×C` image with samples in `[0, 1]`, stored row-major, channel-last.
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    color_space: ColorSpace,
    data: Vec<f64>,
}

impl std::fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor({}x{}x{}, {:?})", self.height, self.width, self.channels(), self.color_space)
    }
}

impl ImageTensor {
    /// Builds an image, clamping samples into `[0, 1]`. Non-finite samples are rejected.
    pub fn new(height: usize, width: usize, color_space: ColorSpace, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail_arg!("image dimensions must be positive, got {height}x{width}");
        }
        let expected = height * width * color_space.channels();
        if data.len() != expected {
            bail_arg!("{height}x{width} {color_space:?} image needs {expected} samples, got {}", data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { term: "image samples".into() });
        }
        clamp_unit(&mut data);
        Ok(Self { height, width, color_space, data })
    }

    pub fn filled(height: usize, width: usize, color_space: ColorSpace, value: f64) -> Result<Self> {
        Self::new(height, width, color_space, vec![value; height * width * color_space.channels()])
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        color_space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let c = color_space.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(height, width, color_space, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color_space.channels()
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    /// `[1, H, W, C]` tensor for network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width, self.channels()], self.data.clone())
    }

    /// Stacks same-sized images into an `[N, H, W, C]` batch.
    pub fn stack(images: &[ImageTensor]) -> Result<Tensor> {
        let Some(first) = images.first() else { bail_arg!("cannot stack an empty batch") };
        let mut data = Vec::with_capacity(first.data.len() * images.len());
        for img in images {
            if img.dims() != first.dims() {
                bail_arg!("batch images differ in shape: {:?} vs {:?}", img.dims(), first.dims());
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(&[images.len(), first.height, first.width, first.channels()], data))
    }

    /// Extracts sample `index` of an `[N, H, W, C]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let [n, h, w, c] = t.dims4();
        if index >= n {
            bail_arg!("sample {index} out of range for batch of {n}");
        }
        let color_space = match c {
            3 => ColorSpace::Rgb,
            1 => ColorSpace::Luma,
            _ => bail_arg!("an image needs 1 or 3 channels, tensor has {c}"),
        };
        let per = h * w * c;
        Self::new(h, w, color_space, t.data()[index * per..(index + 1) * per].to_vec())
    }

    /// Single-channel view of channel `c`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels() {
            bail_arg!("channel {c} out of range for a {}-channel image", self.channels());
        }
        let data = self.data.iter().skip(c).step_by(self.channels()).copied().collect();
        Self::new(self.height, self.width, ColorSpace::Luma, data)
    }

    /// Interleaves three single-channel images into RGB.
    pub fn from_channels(planes: &[ImageTensor]) -> Result<Self> {
        if planes.len() != 3 {
            bail_arg!("RGB needs 3 planes, got {}", planes.len());
        }
        let (h, w) = (planes[0].height, planes[0].width);
        if planes.iter().any(|p| p.dims() != (h, w, 1)) {
            bail_arg!("planes must be single-channel and equally sized");
        }
        let data = (0..h * w).flat_map(|i| planes.iter().map(move |p| p.data[i])).collect();
        Self::new(h, w, ColorSpace::Rgb, data)
    }

    /// BT.601 luma (weights 0.299, 0.587, 0.114); identity for LUMA images.
    pub fn luminance(&self) -> Self {
        match self.color_space {
            ColorSpace::Luma => self.clone(),
            ColorSpace::Rgb => {
                let data = self
                    .data
                    .chunks(3)
                    .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
                    .collect();
                Self { height: self.height, width: self.width, color_space: ColorSpace::Luma, data }
            }
        }
    }

    /// Sub-image with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            bail_arg!(
                "crop {height}x{width}+{top}+{left} outside {}x{} image",
                self.height,
                self.width
            );
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self { height, width, color_space: self.color_space, data })
    }

    /// Applies `f` to every sample, clamping the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.color_space, self.data.iter().map(|&v| f(v)).collect())
    }
}

fn clamp_unit(data: &mut [f64]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn map_image_error(path: &Path, err: ImageError) -> Error {
    match err {
        ImageError::IoError(e) => Error::io(path, e),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Loads a PNG, JPEG or TIFF as RGB in `[0, 1]`. 16-bit sources keep their precision.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| map_image_error(path, e))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            img.to_rgb16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()
        }
        _ => img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
    };
    ImageTensor::new(height, width, ColorSpace::Rgb, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            b => bail_arg!("bit depth must be 8 or 16, got {b}"),
        }
    }
}

/// Writes an image; the container format follows the file extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match (img.color_space, depth) {
        (ColorSpace::Rgb, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, quantize(&img.data, 255.0)).expect("buffer size"),
        ),
        (ColorSpace::Rgb, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, quantize(&img.data, 65535.0)).expect("buffer size"),
        ),
        (ColorSpace::Luma, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, quantize(&img.data, 255.0)).expect("buffer size"),
        ),
        (ColorSpace::Luma, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, quantize(&img.data, 65535.0)).expect("buffer size"),
        ),
    };
    dynamic.save(path).map_err(|e| map_image_error(path, e))
}

fn quantize<T: TryFrom<u32>>(data: &[f64], max: f64) -> Vec<T>
where
    T::Error: std::fmt::Debug,
{
    data.iter()
        .map(|v| T::try_from((v * max).round().clamp(0.0, max) as u32).expect("sample in range"))
        .collect()
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(input index, weight)` for one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    // Widen the kernel when downscaling so it acts as an anti-aliasing filter.
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = 0.0;
            for i in lo..=hi {
                let w = cubic((i as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                // Edge replication.
                let idx = i.clamp(0, in_len as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Output size along one axis for a scale factor.
fn scaled_len(len: usize, factor: f64) -> usize {
    (len as f64 * factor).round() as usize
}

/// Separable bicubic resampling to an explicit size, without the final clamp.
fn resample_unclamped(img: &ImageTensor, out_h: usize, out_w: usize) -> Vec<f64> {
    let c = img.channels();
    let (h, w) = (img.height, img.width);
    let col_taps = axis_taps(w, out_w);
    let row_taps = axis_taps(h, out_h);

    let mut horizontal = vec![0.0; h * out_w * c];
    for y in 0..h {
        let src = &img.data[y * w * c..(y + 1) * w * c];
        let dst = &mut horizontal[y * out_w * c..(y + 1) * out_w * c];
        for (ox, taps) in col_taps.iter().enumerate() {
            for ch in 0..c {
                dst[ox * c + ch] = taps.iter().map(|&(ix, wt)| wt * src[ix * c + ch]).sum();
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    let row_len = out_w * c;
    for (oy, taps) in row_taps.iter().enumerate() {
        let dst = &mut out[oy * row_len..(oy + 1) * row_len];
        for &(iy, wt) in taps {
            let src = &horizontal[iy * row_len..(iy + 1) * row_len];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Bicubic resampling by `factor` (output size `round(H·factor) × round(W·factor)`),
/// anti-aliased when downscaling, with edge replication and a final clamp.
pub fn bicubic_resize(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    if !(factor.is_finite() && factor > 0.0) {
        bail_arg!("resize factor must be a positive number, got {factor}");
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (out_h, out_w) = (scaled_len(img.height, factor), scaled_len(img.width, factor));
    resize_to(img, out_h, out_w)
}

/// Bicubic resampling to an explicit output size.
pub fn resize_to(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        bail_arg!(
            "resampling {}x{} to {out_h}x{out_w} gives an empty image",
            img.height,
            img.width
        );
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let data = resample_unclamped(img, out_h, out_w);
    ImageTensor::new(out_h, out_w, img.color_space, data)
}

fn check_scale(s: usize) -> Result<()> {
    if !matches!(s, 2 | 4 | 8 | 16) {
        bail_arg!("scale must be one of 2, 4, 8, 16, got {s}");
    }
    Ok(())
}

fn check_divisible(img: &ImageTensor, s: usize) -> Result<()> {
    if !img.height.is_multiple_of(s) || !img.width.is_multiple_of(s) {
        bail_arg!(
            "{}x{} image is not divisible by scale {s}; crop it first (see crop_aligned)",
            img.height,
            img.width
        );
    }
    Ok(())
}

/// Synthesizes the LR counterpart of an HR image: bicubic downscale by `s`.
pub fn degrade_bicubic(hr: &ImageTensor, s: usize) -> Result<ImageTensor> {
    check_scale(s)?;
    check_divisible(hr, s)?;
    bicubic_resize(hr, 1.0 / s as f64)
}

/// Bicubic downscale by `s` followed by bicubic upscale by `s`.
pub fn down_up(img: &ImageTensor, s: usize) -> Result<ImageTensor> {
    let low = degrade_bicubic(img, s)?;
    resize_to(&low, img.height, img.width)
}

/// Center crop to the largest size whose sides are multiples of `s`.
pub fn crop_aligned(img: &ImageTensor, s: usize) -> Result<ImageTensor> {
    if s == 0 {
        bail_arg!("alignment must be positive");
    }
    let (h, w) = (img.height / s * s, img.width / s * s);
    if h == 0 || w == 0 {
        bail_arg!("{}x{} image is smaller than the alignment {s}", img.height, img.width);
    }
    if (h, w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    img.crop((img.height - h) / 2, (img.width - w) / 2, h, w)
}
