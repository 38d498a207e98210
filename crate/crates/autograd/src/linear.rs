//! Linear operators with explicit adjoints.
//!
//! A linear op's backward rule is its adjoint, and the adjoint's backward rule
//! is the op again, so any composition of these maps supports gradients of
//! arbitrary order.

use std::rc::Rc;

use crate::tensor::Tensor;
use crate::var::Var;

pub trait LinearMap {
    fn name(&self) -> &'static str;
    fn apply(&self, x: &Tensor) -> Tensor;
    /// The adjoint `A*`, satisfying `<A x, y> = <x, A* y>`.
    fn adjoint(&self, y: &Tensor) -> Tensor;
}

struct Adjoint(Rc<dyn LinearMap>);

impl LinearMap for Adjoint {
    fn name(&self) -> &'static str {
        "adjoint"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        self.0.adjoint(x)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        self.0.apply(y)
    }
}

/// Applies `map` to `x` as a differentiable operation.
pub fn linear(x: &Var, map: Rc<dyn LinearMap>) -> Var {
    let value = map.apply(x.value());
    let name = map.name();
    Var::from_op(value, name, vec![x.clone()], move |ctx| {
        let adj: Rc<dyn LinearMap> = Rc::new(Adjoint(map.clone()));
        vec![Some(linear(ctx.grad, adj))]
    })
}

/// Sum of all elements into a shape-`[1]` tensor.
pub struct SumAll {
    pub shape: Vec<usize>,
}

impl LinearMap for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum())
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        Tensor::full(&self.shape, y.item())
    }
}

pub struct Reshape {
    pub from: Vec<usize>,
    pub to: Vec<usize>,
}

impl LinearMap for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        x.clone().reshape(&self.to)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        y.clone().reshape(&self.from)
    }
}

/// Sums the last axis: `[.., K] -> [..]`.
pub struct SumLastAxis {
    pub shape: Vec<usize>,
}

impl LinearMap for SumLastAxis {
    fn name(&self) -> &'static str {
        "sum_last_axis"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let k = *self.shape.last().expect("rank >= 1");
        let out_shape = &self.shape[..self.shape.len() - 1];
        let data = x.data().chunks(k).map(|c| c.iter().sum()).collect();
        Tensor::new(out_shape, data)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let k = *self.shape.last().expect("rank >= 1");
        let data = y.data().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
        Tensor::new(&self.shape, data)
    }
}

/// Broadcasts a per-channel vector `[C]` over an `[.., C]` shape.
pub struct BroadcastChannels {
    pub shape: Vec<usize>,
}

impl LinearMap for BroadcastChannels {
    fn name(&self) -> &'static str {
        "broadcast_channels"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.numel();
        assert_eq!(*self.shape.last().unwrap(), c, "broadcast channel mismatch");
        let n: usize = self.shape.iter().product();
        let data = (0..n).map(|i| x.data()[i % c]).collect();
        Tensor::new(&self.shape, data)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let c = *self.shape.last().unwrap();
        let mut out = vec![0.0; c];
        for chunk in y.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::new(&[c], out)
    }
}

/// Broadcasts a per-sample vector `[N]` over an `[N, ..]` shape.
pub struct BroadcastSamples {
    pub shape: Vec<usize>,
}

impl LinearMap for BroadcastSamples {
    fn name(&self) -> &'static str {
        "broadcast_samples"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let n = self.shape[0];
        assert_eq!(x.numel(), n, "broadcast sample mismatch");
        let per: usize = self.shape[1..].iter().product();
        let data = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect();
        Tensor::new(&self.shape, data)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let n = self.shape[0];
        let per: usize = self.shape[1..].iter().product();
        let data = y.data().chunks(per).map(|c| c.iter().sum()).collect();
        Tensor::new(&[n], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Edge replication.
    Replicate,
}

/// Spatial padding of an NHWC tensor by `pad` pixels on every side.
pub struct Pad {
    pub in_shape: [usize; 4],
    pub pad: usize,
    pub mode: PadMode,
}

impl Pad {
    fn source(&self, coord: isize, len: usize) -> Option<usize> {
        if coord >= 0 && (coord as usize) < len {
            Some(coord as usize)
        } else {
            match self.mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(coord.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    fn out_shape(&self) -> [usize; 4] {
        let [n, h, w, c] = self.in_shape;
        [n, h + 2 * self.pad, w + 2 * self.pad, c]
    }
}

impl LinearMap for Pad {
    fn name(&self) -> &'static str {
        "pad"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let [n, h, w, c] = self.in_shape;
        let [_, ho, wo, _] = self.out_shape();
        let p = self.pad as isize;
        let src = x.data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                let Some(iy) = self.source(oy as isize - p, h) else { continue };
                for ox in 0..wo {
                    let Some(ix) = self.source(ox as isize - p, w) else { continue };
                    let s = ((b * h + iy) * w + ix) * c;
                    let d = ((b * ho + oy) * wo + ox) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        Tensor::new(&self.out_shape(), out)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let [n, h, w, c] = self.in_shape;
        let [_, ho, wo, _] = self.out_shape();
        let p = self.pad as isize;
        let src = y.data();
        let mut out = vec![0.0; n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                let Some(iy) = self.source(oy as isize - p, h) else { continue };
                for ox in 0..wo {
                    let Some(ix) = self.source(ox as isize - p, w) else { continue };
                    let s = ((b * ho + oy) * wo + ox) * c;
                    let d = ((b * h + iy) * w + ix) * c;
                    for k in 0..c {
                        out[d + k] += src[s + k];
                    }
                }
            }
        }
        Tensor::new(&self.in_shape, out)
    }
}

/// Sub-pixel rearrangement `[N, H, W, C*r*r] -> [N, rH, rW, C]`.
///
/// Input channel `(c * r + dy) * r + dx` lands at output pixel
/// `(r*y + dy, r*x + dx)`, channel `c`.
pub struct PixelShuffle {
    pub in_shape: [usize; 4],
    pub factor: usize,
}

impl PixelShuffle {
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [n, h, w, cin] = self.in_shape;
        let r = self.factor;
        let c = cin / (r * r);
        let (ho, wo) = (h * r, w * r);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let src_base = ((b * h + y) * w + x) * cin;
                    for ch in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                let src = src_base + (ch * r + dy) * r + dx;
                                let dst = ((b * ho + y * r + dy) * wo + x * r + dx) * c + ch;
                                f(src, dst);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn out_shape(&self) -> [usize; 4] {
        let [n, h, w, c] = self.in_shape;
        let r = self.factor;
        assert_eq!(c % (r * r), 0, "pixel shuffle needs channels divisible by r^2");
        [n, h * r, w * r, c / (r * r)]
    }
}

impl LinearMap for PixelShuffle {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = vec![0.0; x.numel()];
        let src = x.data();
        self.for_each(|s, d| out[d] = src[s]);
        Tensor::new(&self.out_shape(), out)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let mut out = vec![0.0; y.numel()];
        let src = y.data();
        self.for_each(|s, d| out[s] = src[d]);
        Tensor::new(&self.in_shape, out)
    }
}

/// 2×2 average pooling with stride 2. Odd trailing rows/columns are dropped.
pub struct AvgPool2 {
    pub in_shape: [usize; 4],
}

impl AvgPool2 {
    pub fn out_shape(&self) -> [usize; 4] {
        let [n, h, w, c] = self.in_shape;
        [n, h / 2, w / 2, c]
    }
}

impl LinearMap for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let [n, h, w, c] = self.in_shape;
        let [_, ho, wo, _] = self.out_shape();
        let src = x.data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let d = ((b * ho + oy) * wo + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for k in 0..c {
                            out[d + k] += 0.25 * src[s + k];
                        }
                    }
                }
            }
        }
        Tensor::new(&self.out_shape(), out)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let [n, h, w, c] = self.in_shape;
        let [_, ho, wo, _] = self.out_shape();
        let src = y.data();
        let mut out = vec![0.0; n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let s = ((b * ho + oy) * wo + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let d = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for k in 0..c {
                            out[d + k] = 0.25 * src[s + k];
                        }
                    }
                }
            }
        }
        Tensor::new(&self.in_shape, out)
    }
}

/// Selects `out[i] = x[index[i]]`; the adjoint scatter-adds.
pub struct Gather {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub index: Rc<Vec<usize>>,
}

impl LinearMap for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let src = x.data();
        let data = self.index.iter().map(|&i| src[i]).collect();
        Tensor::new(&self.out_shape, data)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&self.in_shape);
        let dst = out.data_mut();
        for (&i, v) in self.index.iter().zip(y.data()) {
            dst[i] += v;
        }
        out
    }
}

/// Channel range `[start, start + len)` of an `[.., C]` tensor.
pub struct ChannelSlice {
    pub in_shape: Vec<usize>,
    pub start: usize,
    pub len: usize,
}

impl ChannelSlice {
    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.in_shape.clone();
        *s.last_mut().unwrap() = self.len;
        s
    }
}

impl LinearMap for ChannelSlice {
    fn name(&self) -> &'static str {
        "channel_slice"
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let c = *self.in_shape.last().unwrap();
        let data = x
            .data()
            .chunks(c)
            .flat_map(|px| px[self.start..self.start + self.len].iter().copied())
            .collect();
        Tensor::new(&self.out_shape(), data)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let c = *self.in_shape.last().unwrap();
        let mut out = Tensor::zeros(&self.in_shape);
        for (dst, src) in out.data_mut().chunks_mut(c).zip(y.data().chunks(self.len)) {
            dst[self.start..self.start + self.len].copy_from_slice(src);
        }
        out
    }
}
