//! Elementwise, dense and reduction operations on the tape.

use super::tape::{BackwardCtx, Tape, Var};
use super::tensor::{Real, Tensor};

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) {
    assert_eq!(
        tape.value(a).shape(),
        tape.value(b).shape(),
        "{what}: operand shapes differ"
    );
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    same_shape(tape, a, b, "add");
    let mut out = tape.value(a).clone();
    out.add_assign(tape.value(b));
    tape.push_op(
        &[a, b],
        out,
        Box::new(|ctx: &BackwardCtx<T>| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
    )
}

/// `x + c` for a constant tensor `c` of the same shape.
pub fn add_const<T: Real>(tape: &mut Tape<T>, x: Var, c: &Tensor<T>) -> Var {
    let mut out = tape.value(x).clone();
    out.add_assign(c);
    tape.push_op(
        &[x],
        out,
        Box::new(|ctx: &BackwardCtx<T>| vec![Some(ctx.grad.clone())]),
    )
}

pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    same_shape(tape, a, b, "mul");
    let (va, vb) = (tape.value(a), tape.value(b));
    let data = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::from_vec(va.rows(), va.cols(), data);
    tape.push_op(
        &[a, b],
        out,
        Box::new(|ctx: &BackwardCtx<T>| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = ctx.needs[0].then(|| {
                let d = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                Tensor::from_vec(a.rows(), a.cols(), d)
            });
            let gb = ctx.needs[1].then(|| {
                let d = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                Tensor::from_vec(b.rows(), b.cols(), d)
            });
            vec![ga, gb]
        }),
    )
}

pub fn scale<T: Real>(tape: &mut Tape<T>, x: Var, s: f64) -> Var {
    let s = T::of(s);
    let out = tape.value(x).map(|v| v * s);
    tape.push_op(
        &[x],
        out,
        Box::new(move |ctx: &BackwardCtx<T>| vec![Some(ctx.grad.map(|g| g * s))]),
    )
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(|v| v.max(T::zero()));
    tape.push_op(
        &[x],
        out,
        Box::new(|ctx: &BackwardCtx<T>| {
            let d = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.output.data())
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_vec(ctx.grad.rows(), ctx.grad.cols(), d))]
        }),
    )
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `softplus(x) + floor`, elementwise.
pub fn softplus_floor<T: Real>(tape: &mut Tape<T>, x: Var, floor: f64) -> Var {
    let floor = T::of(floor);
    let out = tape.value(x).map(|v| softplus(v) + floor);
    tape.push_op(
        &[x],
        out,
        Box::new(|ctx: &BackwardCtx<T>| {
            let d = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(&g, &x)| g * sigmoid(x))
                .collect();
            vec![Some(Tensor::from_vec(ctx.grad.rows(), ctx.grad.cols(), d))]
        }),
    )
}

/// `out += x · w` for row-major `x: n×k`, `w: k×m`, `out: n×m`.
pub fn matmul_acc<T: Real>(x: &Tensor<T>, w: &Tensor<T>, out: &mut Tensor<T>) {
    let (n, k) = x.shape();
    let m = w.cols();
    assert_eq!(w.rows(), k);
    assert_eq!(out.shape(), (n, m));
    T::gemm(
        n,
        k,
        m,
        x.data(),
        false,
        w.data(),
        false,
        T::one(),
        out.data_mut(),
    );
}

/// Dense layer `x · w + b` with `x: n×k`, `w: k×m`, `b: 1×m`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    assert_eq!(
        xv.cols(),
        wv.rows(),
        "linear: input width does not match weights"
    );
    assert_eq!(bv.shape(), (1, wv.cols()), "linear: bias shape");
    let mut out = Tensor::zeros(xv.rows(), wv.cols());
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(bv.data());
    }
    matmul_acc(xv, wv, &mut out);
    tape.push_op(&[x, w, b], out, Box::new(linear_backward::<T>))
}

fn linear_backward<T: Real>(ctx: &BackwardCtx<T>) -> Vec<Option<Tensor<T>>> {
    let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
    let g = ctx.grad;
    let (n, k) = x.shape();
    let m = w.cols();
    let gx = ctx.needs[0].then(|| {
        let mut gx = Tensor::zeros(n, k);
        T::gemm(
            n,
            m,
            k,
            g.data(),
            false,
            w.data(),
            true,
            T::zero(),
            gx.data_mut(),
        );
        gx
    });
    let gw = ctx.needs[1].then(|| {
        let mut gw = Tensor::zeros(k, m);
        T::gemm(
            k,
            n,
            m,
            x.data(),
            true,
            g.data(),
            false,
            T::zero(),
            gw.data_mut(),
        );
        gw
    });
    let gb = ctx.needs[2].then(|| column_sums(g));
    vec![gx, gw, gb]
}

pub(crate) fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Columns `[start, end)` of `x`.
pub fn slice_cols<T: Real>(tape: &mut Tape<T>, x: Var, start: usize, end: usize) -> Var {
    let out = tape.value(x).slice_cols(start, end);
    tape.push_op(
        &[x],
        out,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let (n, c) = ctx.inputs[0].shape();
            let mut g = Tensor::zeros(n, c);
            for r in 0..n {
                g.row_mut(r)[start..end].copy_from_slice(ctx.grad.row(r));
            }
            vec![Some(g)]
        }),
    )
}

pub fn sum<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.value(x).sum();
    tape.push_scalar_op(
        &[x],
        s,
        Box::new(|ctx: &BackwardCtx<T>| {
            let (r, c) = ctx.inputs[0].shape();
            vec![Some(Tensor::filled(r, c, ctx.grad.item()))]
        }),
    )
}

/// `Σ x ⊙ w` for a constant weight tensor, accumulated in 64-bit.
pub fn dot_const<T: Real>(tape: &mut Tape<T>, x: Var, w: &Tensor<T>) -> Var {
    let xv = tape.value(x);
    assert_eq!(xv.shape(), w.shape(), "dot_const shape mismatch");
    let s: f64 = xv
        .data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a.f64() * b.f64())
        .sum();
    let w = w.clone();
    tape.push_scalar_op(
        &[x],
        s,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let g = ctx.grad.item();
            vec![Some(w.map(|v| v * g))]
        }),
    )
}

/// `Σ cᵢ·sᵢ` over scalar vars.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[Var], coeffs: &[f64]) -> Var {
    assert_eq!(terms.len(), coeffs.len());
    let s: f64 = terms
        .iter()
        .zip(coeffs)
        .map(|(&v, &c)| tape.scalar(v) * c)
        .sum();
    let coeffs = coeffs.to_vec();
    tape.push_scalar_op(
        terms,
        s,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let g = ctx.grad.item().f64();
            coeffs
                .iter()
                .map(|&c| Some(Tensor::scalar(T::of(g * c))))
                .collect()
        }),
    )
}

/// Mean squared error against a constant target.
pub fn mse<T: Real>(tape: &mut Tape<T>, x: Var, target: &Tensor<T>) -> Var {
    let xv = tape.value(x);
    assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
    let n = xv.len().max(1) as f64;
    let s: f64 = xv
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    let target = target.clone();
    tape.push_scalar_op(
        &[x],
        s / n,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let k = T::of(2.0 * ctx.grad.item().f64() / n);
            let d = ctx.inputs[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| k * (a - b))
                .collect();
            vec![Some(Tensor::from_vec(target.rows(), target.cols(), d))]
        }),
    )
}
