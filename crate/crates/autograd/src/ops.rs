//! Elementwise arithmetic, reductions and shape helpers on [`Var`].

use std::rc::Rc;

use crate::linear::{
    linear, AvgPool2, BroadcastChannels, BroadcastSamples, ChannelSlice, Gather, Pad, PadMode,
    PixelShuffle, Reshape, SumAll, SumLastAxis,
};
use crate::tensor::Tensor;
use crate::var::Var;

fn same_shape(op: &str, a: &Var, b: &Var) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

pub fn add(a: &Var, b: &Var) -> Var {
    same_shape("add", a, b);
    let value = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(value, "add", vec![a.clone(), b.clone()], |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    })
}

pub fn sub(a: &Var, b: &Var) -> Var {
    same_shape("sub", a, b);
    let value = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(value, "sub", vec![a.clone(), b.clone()], |ctx| {
        vec![Some(ctx.grad.clone()), ctx.needs[1].then(|| neg(ctx.grad))]
    })
}

pub fn mul(a: &Var, b: &Var) -> Var {
    same_shape("mul", a, b);
    let value = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(value, "mul", vec![a.clone(), b.clone()], |ctx| {
        let [a, b] = [&ctx.inputs[0], &ctx.inputs[1]];
        vec![ctx.needs[0].then(|| mul(ctx.grad, b)), ctx.needs[1].then(|| mul(ctx.grad, a))]
    })
}

pub fn neg(a: &Var) -> Var {
    scale(a, -1.0)
}

pub fn scale(a: &Var, k: f64) -> Var {
    let value = a.value().map(|x| k * x);
    Var::from_op(value, "scale", vec![a.clone()], move |ctx| vec![Some(scale(ctx.grad, k))])
}

pub fn add_scalar(a: &Var, k: f64) -> Var {
    let value = a.value().map(|x| x + k);
    Var::from_op(value, "add_scalar", vec![a.clone()], |ctx| vec![Some(ctx.grad.clone())])
}

/// Elementwise product with a constant tensor.
pub fn mul_const(a: &Var, c: Rc<Tensor>) -> Var {
    let value = a.value().zip_map(&c, |x, y| x * y);
    Var::from_op(value, "mul_const", vec![a.clone()], move |ctx| {
        vec![Some(mul_const(ctx.grad, c.clone()))]
    })
}

/// Elementwise `a^p`.
pub fn powf(a: &Var, p: f64) -> Var {
    let value = a.value().map(|x| x.powf(p));
    Var::from_op(value, "powf", vec![a.clone()], move |ctx| {
        let d = scale(&powf(&ctx.inputs[0], p - 1.0), p);
        vec![Some(mul(ctx.grad, &d))]
    })
}

pub fn square(a: &Var) -> Var {
    mul(a, a)
}

/// `sqrt(a + eps) - sqrt(eps)`: zero at zero with a finite derivative there.
pub fn sqrt_eps(a: &Var, eps: f64) -> Var {
    add_scalar(&powf(&add_scalar(a, eps), 0.5), -eps.sqrt())
}

pub fn relu(a: &Var) -> Var {
    let mask = a.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    mul_const(a, Rc::new(mask))
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    let mask = a.value().map(|x| if x > 0.0 { 1.0 } else { slope });
    mul_const(a, Rc::new(mask))
}

pub fn abs(a: &Var) -> Var {
    let sign = a.value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
    mul_const(a, Rc::new(sign))
}

pub fn sum(a: &Var) -> Var {
    linear(a, Rc::new(SumAll { shape: a.shape().to_vec() }))
}

pub fn mean(a: &Var) -> Var {
    let n = a.value().numel() as f64;
    scale(&sum(a), 1.0 / n)
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    linear(a, Rc::new(Reshape { from: a.shape().to_vec(), to: shape.to_vec() }))
}

pub fn sum_last_axis(a: &Var) -> Var {
    linear(a, Rc::new(SumLastAxis { shape: a.shape().to_vec() }))
}

/// Per-sample sum of an `[N, ..]` tensor, giving `[N]`.
pub fn sum_per_sample(a: &Var) -> Var {
    let n = a.shape()[0];
    let per = a.value().numel() / n;
    sum_last_axis(&reshape(a, &[n, per]))
}

/// Broadcasts a `[C]` bias over `shape` (whose last axis is `C`).
pub fn broadcast_channels(b: &Var, shape: &[usize]) -> Var {
    linear(b, Rc::new(BroadcastChannels { shape: shape.to_vec() }))
}

/// Broadcasts a `[N]` vector over an `[N, ..]` shape.
pub fn broadcast_samples(v: &Var, shape: &[usize]) -> Var {
    linear(v, Rc::new(BroadcastSamples { shape: shape.to_vec() }))
}

pub fn add_bias(x: &Var, b: &Var) -> Var {
    add(x, &broadcast_channels(b, x.shape()))
}

pub fn pad(x: &Var, pad: usize, mode: PadMode) -> Var {
    if pad == 0 {
        return x.clone();
    }
    linear(x, Rc::new(Pad { in_shape: x.value().dims4(), pad, mode }))
}

pub fn pixel_shuffle(x: &Var, factor: usize) -> Var {
    linear(x, Rc::new(PixelShuffle { in_shape: x.value().dims4(), factor }))
}

pub fn avg_pool2(x: &Var) -> Var {
    linear(x, Rc::new(AvgPool2 { in_shape: x.value().dims4() }))
}

/// 2×2 max pooling with stride 2, routed through a gather so it stays
/// differentiable to any order (the argmax pattern is held fixed).
pub fn max_pool2(x: &Var) -> Var {
    let [n, h, w, c] = x.value().dims4();
    let (ho, wo) = (h / 2, w / 2);
    let src = x.value().data();
    let mut index = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for k in 0..c {
                    let mut best = ((b * h + 2 * oy) * w + 2 * ox) * c + k;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + k;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    index.push(best);
                }
            }
        }
    }
    let map = Gather {
        in_shape: x.shape().to_vec(),
        out_shape: vec![n, ho, wo, c],
        index: Rc::new(index),
    };
    linear(x, Rc::new(map))
}

pub fn slice_channels(x: &Var, start: usize, len: usize) -> Var {
    linear(x, Rc::new(ChannelSlice { in_shape: x.shape().to_vec(), start, len }))
}

/// Concatenation along the channel (last) axis.
pub fn concat_channels(parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat of nothing");
    let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
    let total: usize = parts.iter().map(|p| *p.shape().last().unwrap()).sum();
    let mut out_shape = lead.to_vec();
    out_shape.push(total);
    let mut start = 0;
    let mut acc: Option<Var> = None;
    for p in parts {
        assert_eq!(&p.shape()[..p.shape().len() - 1], lead, "concat: leading dims differ");
        let len = *p.shape().last().unwrap();
        let embed = embed_channels(p, &out_shape, start);
        acc = Some(match acc {
            Some(a) => add(&a, &embed),
            None => embed,
        });
        start += len;
    }
    acc.unwrap()
}

/// Places `x` into channels `[start, start + C_x)` of a zero tensor of `shape`.
pub fn embed_channels(x: &Var, shape: &[usize], start: usize) -> Var {
    let len = *x.shape().last().unwrap();
    let slice: Rc<dyn crate::linear::LinearMap> =
        Rc::new(ChannelSlice { in_shape: shape.to_vec(), start, len });
    // Adjoint of a channel slice is the zero-filled embedding.
    struct Embed(Rc<dyn crate::linear::LinearMap>);
    impl crate::linear::LinearMap for Embed {
        fn name(&self) -> &'static str {
            "embed_channels"
        }
        fn apply(&self, x: &Tensor) -> Tensor {
            self.0.adjoint(x)
        }
        fn adjoint(&self, y: &Tensor) -> Tensor {
            self.0.apply(y)
        }
    }
    linear(x, Rc::new(Embed(slice)))
}
