//! Windowed self-attention on sparse tensors with cosine-similarity weights.
//!
//! For each site `i` with window neighbors `N(i)`:
//!
//! ```text
//! f'_i = Σ_{j∈N(i)} cos(θ(f_i), α(f_j) + δ(c_i − c_j)) · λ(f_j)
//! ```
//!
//! Weights are plain cosines in `[-1, 1]`; they are not normalized across the
//! neighborhood, so a lone neighbor keeps its cosine value.

use std::sync::Arc;

use rand::Rng;

use crate::diff::{ops, BackwardCtx, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::sparse::{NeighborTable, SparseTensor};

/// Norm below which a cosine argument is treated as zero (weight 0).
pub const NORM_EPS: f64 = 1e-12;

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

/// Per-entry attention weights in [`NeighborTable`] entry order.
pub fn attention_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    pe: &Tensor<T>,
    table: &NeighborTable,
) -> Vec<f64> {
    let c = q.cols();
    let mut key = vec![T::zero(); c];
    let mut out = Vec::with_capacity(table.entries.len());
    for i in 0..table.rows() {
        let qi = q.row(i);
        let qn = dot(qi, qi).sqrt();
        for &(j, s) in table.neighbors(i) {
            for ((dst, &a), &b) in key
                .iter_mut()
                .zip(k.row(j as usize))
                .zip(pe.row(s as usize))
            {
                *dst = a + b;
            }
            let kn = dot(&key, &key).sqrt();
            out.push(if qn < NORM_EPS || kn < NORM_EPS {
                0.0
            } else {
                dot(qi, &key) / (qn * kn)
            });
        }
    }
    out
}

/// `out_i = Σ_j w_ij · v_j` with cosine weights.
pub fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pe: &Tensor<T>,
    table: &NeighborTable,
) -> Tensor<T> {
    let weights = attention_weights(q, k, pe, table);
    let c = v.cols();
    let mut out = vec![0.0f64; q.rows() * c];
    let mut e = 0;
    for i in 0..table.rows() {
        let orow = &mut out[i * c..(i + 1) * c];
        for &(j, _) in table.neighbors(i) {
            let w = weights[e];
            e += 1;
            if w == 0.0 {
                continue;
            }
            for (o, &x) in orow.iter_mut().zip(v.row(j as usize)) {
                *o += w * x.f64();
            }
        }
    }
    Tensor::from_vec(q.rows(), c, out.into_iter().map(T::of).collect())
}

fn attention_backward<T: Real>(
    ctx: &BackwardCtx<T>,
    table: &NeighborTable,
) -> Vec<Option<Tensor<T>>> {
    let (q, k, v, pe) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.inputs[3]);
    let g = ctx.grad;
    let c = q.cols();
    let mut gq = vec![0.0f64; q.len()];
    let mut gk = vec![0.0f64; k.len()];
    let mut gv = vec![0.0f64; v.len()];
    let mut gpe = vec![0.0f64; pe.len()];
    let mut key = vec![T::zero(); c];
    for i in 0..table.rows() {
        let qi = q.row(i);
        let gi = g.row(i);
        let qn = dot(qi, qi).sqrt();
        for &(j, s) in table.neighbors(i) {
            let (j, s) = (j as usize, s as usize);
            for ((dst, &a), &b) in key.iter_mut().zip(k.row(j)).zip(pe.row(s)) {
                *dst = a + b;
            }
            let kn = dot(&key, &key).sqrt();
            if qn < NORM_EPS || kn < NORM_EPS {
                continue;
            }
            let w = dot(qi, &key) / (qn * kn);
            let vj = v.row(j);
            for (dst, &gv_) in gv[j * c..(j + 1) * c].iter_mut().zip(gi) {
                *dst += w * gv_.f64();
            }
            // dL/dw = g_i · v_j
            let dw = dot(gi, vj);
            if dw == 0.0 {
                continue;
            }
            let inv = 1.0 / (qn * kn);
            let (wq, wk) = (w / (qn * qn), w / (kn * kn));
            for a in 0..c {
                let (qa, ka) = (qi[a].f64(), key[a].f64());
                gq[i * c + a] += dw * (ka * inv - wq * qa);
                let dkey = dw * (qa * inv - wk * ka);
                gk[j * c + a] += dkey;
                gpe[s * c + a] += dkey;
            }
        }
    }
    let to_t = |d: Vec<f64>, t: &Tensor<T>| {
        Tensor::from_vec(t.rows(), t.cols(), d.into_iter().map(T::of).collect())
    };
    vec![
        ctx.needs[0].then(|| to_t(gq, q)),
        ctx.needs[1].then(|| to_t(gk, k)),
        ctx.needs[2].then(|| to_t(gv, v)),
        ctx.needs[3].then(|| to_t(gpe, pe)),
    ]
}

/// Records the attention sum for query/key/value rows and a positional table
/// indexed by the neighbor table's offset slots.
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    pe: Var,
    table: Arc<NeighborTable>,
) -> Var {
    let out = attention_forward(
        tape.value(q),
        tape.value(k),
        tape.value(v),
        tape.value(pe),
        &table,
    );
    tape.push_op(
        &[q, k, v, pe],
        out,
        Box::new(move |ctx: &BackwardCtx<T>| attention_backward(ctx, &table)),
    )
}

/// Query (θ), key (α), value (λ) and relative-position (δ) perceptrons.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Mlp,
    pub key: Mlp,
    pub value: Mlp,
    pub position: Mlp,
    pub channels: usize,
    pub window: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if window.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "window size must be odd, got {window}"
            )));
        }
        let c = channels;
        Ok(AttentionParams {
            query: Mlp::new(store, &format!("{name}.query"), c, c, c, rng)?,
            key: Mlp::new(store, &format!("{name}.key"), c, c, c, rng)?,
            value: Mlp::new(store, &format!("{name}.value"), c, c, c, rng)?,
            position: Mlp::new(store, &format!("{name}.position"), 3, c, c, rng)?,
            channels,
            window,
        })
    }

    /// Projections `(θ(f), α(f), λ(f), δ(offsets))` for features `x`.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        x: Var,
        table: &NeighborTable,
    ) -> (Var, Var, Var, Var) {
        let q = self.query.apply(tape, store, x);
        let k = self.key.apply(tape, store, x);
        let v = self.value.apply(tape, store, x);
        let offsets = Tensor::from_vec(
            table.offsets.len(),
            3,
            table
                .offsets
                .iter()
                .flat_map(|o| o.map(|c| T::of(c as f64)))
                .collect(),
        );
        let offsets = tape.constant(offsets);
        let pe = self.position.apply(tape, store, offsets);
        (q, k, v, pe)
    }

    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        x: Var,
        table: &Arc<NeighborTable>,
    ) -> Var {
        let (q, k, v, pe) = self.project(tape, store, x, table);
        attention(tape, q, k, v, pe, table.clone())
    }
}

/// Attention plus identity skip.
#[derive(Clone, Copy, Debug)]
pub struct SpTransBlock {
    pub attention: AttentionParams,
}

impl SpTransBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SpTransBlock {
            attention: AttentionParams::new(store, name, channels, window, rng)?,
        })
    }

    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        x: Var,
        table: &Arc<NeighborTable>,
    ) -> Var {
        let a = self.attention.apply(tape, store, x, table);
        ops::add(tape, x, a)
    }
}

fn check_input(t: &SparseTensor, p: &AttentionParams) -> Result<()> {
    if t.channels() != p.channels {
        return Err(Error::Shape(format!(
            "attention expects {} channels, tensor has {}",
            p.channels,
            t.channels()
        )));
    }
    Ok(())
}

/// Evaluates the attention sum on a concrete tensor.
pub fn local_attention(
    t: &SparseTensor,
    store: &ParamStore,
    p: &AttentionParams,
) -> Result<SparseTensor> {
    check_input(t, p)?;
    let table = Arc::new(NeighborTable::build(&t.coords, p.window)?);
    let mut tape = Tape::new();
    let x = tape.constant(t.feats.clone());
    let out = p.apply(&mut tape, store, x, &table);
    SparseTensor::from_parts(t.coords.clone(), tape.value(out).clone())
}

/// Evaluates one transformer block on a concrete tensor.
pub fn sp_trans_block(
    t: &SparseTensor,
    store: &ParamStore,
    b: &SpTransBlock,
) -> Result<SparseTensor> {
    check_input(t, &b.attention)?;
    let table = Arc::new(NeighborTable::build(&t.coords, b.attention.window)?);
    let mut tape = Tape::new();
    let x = tape.constant(t.feats.clone());
    let out = b.apply(&mut tape, store, x, &table);
    SparseTensor::from_parts(t.coords.clone(), tape.value(out).clone())
}
