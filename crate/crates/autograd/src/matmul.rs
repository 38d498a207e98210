use crate::conv::gemm;
use crate::tensor::Tensor;
use crate::var::Var;

fn dims(t: &Tensor, trans: bool) -> (usize, usize, usize) {
    let &[b, r, c] = t.shape() else {
        panic!("batched matmul expects rank-3 operands, got {:?}", t.shape())
    };
    if trans {
        (b, c, r)
    } else {
        (b, r, c)
    }
}

fn value(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (batch, m, k) = dims(a, ta);
    let (batch_b, kb, n) = dims(b, tb);
    assert_eq!(batch, batch_b, "matmul batch mismatch");
    assert_eq!(k, kb, "matmul inner dimension mismatch: {k} vs {kb}");
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..][..m * k],
            ta,
            &b.data()[i * k * n..][..k * n],
            tb,
            0.0,
            &mut out[i * m * n..][..m * n],
        );
    }
    Tensor::new(&[batch, m, n], out)
}

/// Batched `op(a) · op(b)` over `[B, rows, cols]` operands, where `op`
/// transposes the trailing two axes when the corresponding flag is set.
pub fn matmul(a: &Var, b: &Var, trans_a: bool, trans_b: bool) -> Var {
    let out = value(a.value(), b.value(), trans_a, trans_b);
    Var::from_op(out, "matmul", vec![a.clone(), b.clone()], move |ctx| {
        let [a, b, g] = [&ctx.inputs[0], &ctx.inputs[1], ctx.grad];
        let (da, db) = match (trans_a, trans_b) {
            (false, false) => (
                ctx.needs[0].then(|| matmul(g, b, false, true)),
                ctx.needs[1].then(|| matmul(a, g, true, false)),
            ),
            (true, false) => (
                ctx.needs[0].then(|| matmul(b, g, false, true)),
                ctx.needs[1].then(|| matmul(a, g, false, false)),
            ),
            (false, true) => (
                ctx.needs[0].then(|| matmul(g, b, false, false)),
                ctx.needs[1].then(|| matmul(g, a, true, false)),
            ),
            (true, true) => (
                ctx.needs[0].then(|| matmul(b, g, true, true)),
                ctx.needs[1].then(|| matmul(g, a, true, true)),
            ),
        };
        vec![da, db]
    })
}
