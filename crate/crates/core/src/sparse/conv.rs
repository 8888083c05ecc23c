//! Sparse convolution over occupied sites.
//!
//! Weights for a layer with kernel size `K` are stored as one `(K³·C_in)×C_out`
//! matrix; block `m` (rows `m·C_in..(m+1)·C_in`) belongs to the `m`-th offset of
//! [`kernel_offsets`].

use std::sync::Arc;

use super::{Coord, CoordSet, SparseTensor};
use crate::diff::ops::column_sums;
use crate::diff::{BackwardCtx, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Offsets of the full `K³` cube, z varying fastest.
pub fn kernel_offsets(k: usize) -> Vec<Coord> {
    assert!(k % 2 == 1, "kernel size must be odd");
    let r = (k / 2) as i32;
    let mut out = Vec::with_capacity(k * k * k);
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// For each kernel offset, the `(input row, output row)` pairs it connects.
#[derive(Clone, Debug)]
pub struct KernelMap {
    pub kernel: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    fn gather(
        kernel: usize,
        input: &CoordSet,
        n_out: usize,
        step: i32,
        anchor: impl Fn(usize) -> Coord,
    ) -> Self {
        let offsets = kernel_offsets(kernel);
        let mut pairs = vec![Vec::new(); offsets.len()];
        for o in 0..n_out {
            let a = anchor(o);
            for (m, off) in offsets.iter().enumerate() {
                let c = [
                    a[0] + off[0] * step,
                    a[1] + off[1] * step,
                    a[2] + off[2] * step,
                ];
                if let Some(i) = input.lookup(&c) {
                    pairs[m].push((i as u32, o as u32));
                }
            }
        }
        KernelMap {
            kernel,
            n_in: input.len(),
            n_out,
            pairs,
        }
    }

    /// Stride-1 map: output sites equal input sites.
    pub fn same(set: &CoordSet, kernel: usize) -> Self {
        Self::gather(kernel, set, set.len(), set.stride(), |o| set.coords()[o])
    }

    /// Stride-2 map: coarse output site `c` gathers fine inputs `c + m·s_fine`.
    pub fn down(fine: &CoordSet, coarse: &CoordSet, kernel: usize) -> Result<Self> {
        if coarse.stride() != 2 * fine.stride() {
            return Err(Error::Geometry(format!(
                "down map needs coarse stride {} but got {}",
                2 * fine.stride(),
                coarse.stride()
            )));
        }
        Ok(Self::gather(
            kernel,
            fine,
            coarse.len(),
            fine.stride(),
            |o| coarse.coords()[o],
        ))
    }

    /// Transposed map: fine output site `p` gathers coarse inputs
    /// `parent(p) + m·s_coarse`, where `parent(p)` is its floor quotient.
    pub fn up(coarse: &CoordSet, fine: &CoordSet, kernel: usize) -> Result<Self> {
        if coarse.stride() != 2 * fine.stride() {
            return Err(Error::Geometry(format!(
                "up-convolution target stride {} is not one step finer than {}",
                fine.stride(),
                coarse.stride()
            )));
        }
        let s = coarse.stride();
        Ok(Self::gather(kernel, coarse, fine.len(), s, |o| {
            fine.coords()[o].map(|v| v.div_euclid(s) * s)
        }))
    }

    pub fn offsets(&self) -> usize {
        self.pairs.len()
    }
}

/// Copies rows `idx` of the row-major `src` (width `w`) into `dst`.
fn gather<T: Real>(src: &[T], w: usize, idx: impl Iterator<Item = u32>, dst: &mut Vec<T>) {
    dst.clear();
    for i in idx {
        let i = i as usize;
        dst.extend_from_slice(&src[i * w..(i + 1) * w]);
    }
}

/// Adds the rows of `src` onto rows `idx` of `dst`.
fn scatter_add<T: Real>(src: &[T], w: usize, idx: impl Iterator<Item = u32>, dst: &mut [T]) {
    for (r, i) in idx.enumerate() {
        let i = i as usize;
        for (d, &v) in dst[i * w..(i + 1) * w]
            .iter_mut()
            .zip(&src[r * w..(r + 1) * w])
        {
            *d += v;
        }
    }
}

/// `out[o] = b + Σ_m Σ_{(i,o)} x[i] · W_m`, one gathered matrix product per offset.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    map: &KernelMap,
) -> Tensor<T> {
    let c_in = x.cols();
    let c_out = w.cols();
    assert_eq!(w.rows(), map.offsets() * c_in, "conv weight shape");
    assert_eq!(b.shape(), (1, c_out), "conv bias shape");
    assert_eq!(x.rows(), map.n_in, "conv input rows");
    let mut out = Tensor::zeros(map.n_out, c_out);
    for r in 0..map.n_out {
        out.row_mut(r).copy_from_slice(b.data());
    }
    let wd = w.data();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (m, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let p = pairs.len();
        let wm = &wd[m * c_in * c_out..(m + 1) * c_in * c_out];
        gather(x.data(), c_in, pairs.iter().map(|q| q.0), &mut xs);
        ys.clear();
        ys.resize(p * c_out, T::zero());
        T::gemm(p, c_in, c_out, &xs, false, wm, false, T::zero(), &mut ys);
        scatter_add(&ys, c_out, pairs.iter().map(|q| q.1), out.data_mut());
    }
    out
}

/// Gradients `(dx, dW, db)` of [`conv_forward`]; `dx`/`dW` only when requested.
pub fn conv_backward<T: Real>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    map: &KernelMap,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let c_in = x.cols();
    let c_out = w.cols();
    let wd = w.data();
    let mut gx = need_x.then(|| Tensor::zeros(x.rows(), c_in));
    let mut gw = need_w.then(|| Tensor::zeros(w.rows(), c_out));
    let (mut gs, mut xs, mut tmp) = (Vec::new(), Vec::new(), Vec::new());
    for (m, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let p = pairs.len();
        let block = m * c_in * c_out..(m + 1) * c_in * c_out;
        gather(grad.data(), c_out, pairs.iter().map(|q| q.1), &mut gs);
        if let Some(gx) = gx.as_mut() {
            tmp.clear();
            tmp.resize(p * c_in, T::zero());
            T::gemm(
                p,
                c_out,
                c_in,
                &gs,
                false,
                &wd[block.clone()],
                true,
                T::zero(),
                &mut tmp,
            );
            scatter_add(&tmp, c_in, pairs.iter().map(|q| q.0), gx.data_mut());
        }
        if let Some(gw) = gw.as_mut() {
            gather(x.data(), c_in, pairs.iter().map(|q| q.0), &mut xs);
            let dst = &mut gw.data_mut()[block];
            T::gemm(c_in, p, c_out, &xs, true, &gs, false, T::one(), dst);
        }
    }
    (gx, gw, column_sums(grad))
}

/// Records a sparse convolution on the tape.
pub fn conv<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, map: Arc<KernelMap>) -> Var {
    let out = conv_forward(tape.value(x), tape.value(w), tape.value(b), &map);
    tape.push_op(
        &[x, w, b],
        out,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let (gx, gw, gb) = conv_backward(
                ctx.grad,
                ctx.inputs[0],
                ctx.inputs[1],
                &map,
                ctx.needs[0],
                ctx.needs[1],
            );
            vec![gx, gw, ctx.needs[2].then_some(gb)]
        }),
    )
}

/// A convolution layer with concrete weights.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: usize,
    /// 1 (same sites) or 2 (next pyramid level).
    pub stride: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        ConvLayer {
            kernel,
            stride,
            weight: Tensor::zeros(kernel.pow(3) * c_in, c_out),
            bias: Tensor::zeros(1, c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.rows() / self.kernel.pow(3)
    }

    pub fn c_out(&self) -> usize {
        self.weight.cols()
    }

    /// Mutable block `W_m` for offset index `m`.
    pub fn offset_weight_mut(&mut self, m: usize) -> &mut [f32] {
        let n = self.c_in() * self.c_out();
        &mut self.weight.data_mut()[m * n..(m + 1) * n]
    }

    fn check_width(&self, t: &SparseTensor) -> Result<()> {
        if t.channels() != self.c_in() {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, tensor has {}",
                self.c_in(),
                t.channels()
            )));
        }
        Ok(())
    }
}

/// Applies `layer` to `t`; stride 2 writes onto the next coarser coordinate set.
pub fn sparse_conv(t: &SparseTensor, layer: &ConvLayer) -> Result<SparseTensor> {
    layer.check_width(t)?;
    let (coords, map) = match layer.stride {
        1 => (t.coords.clone(), KernelMap::same(&t.coords, layer.kernel)),
        2 => {
            let coarse = Arc::new(t.coords.coarsen());
            let map = KernelMap::down(&t.coords, &coarse, layer.kernel)?;
            (coarse, map)
        }
        s => return Err(Error::Invalid(format!("unsupported stride {s}"))),
    };
    let feats = conv_forward(&t.feats, &layer.weight, &layer.bias, &map);
    SparseTensor::from_parts(coords, feats)
}

/// Transposed convolution from `t` onto the finer coordinate set `target`.
pub fn sparse_conv_up(
    t: &SparseTensor,
    layer: &ConvLayer,
    target: Arc<CoordSet>,
) -> Result<SparseTensor> {
    layer.check_width(t)?;
    let map = KernelMap::up(&t.coords, &target, layer.kernel)?;
    let feats = conv_forward(&t.feats, &layer.weight, &layer.bias, &map);
    SparseTensor::from_parts(target, feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{check_gradients, GradCheckOptions, Objective};
    use crate::diff::ops;
    use crate::sparse::GeometryPyramid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    struct Chain {
        down: Arc<KernelMap>,
        up: Arc<KernelMap>,
        same: Arc<KernelMap>,
        probe: Tensor,
    }

    impl Objective for Chain {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
            let h = conv(tape, v[0], v[1], v[2], self.down.clone());
            let h = conv(tape, h, v[3], v[4], self.up.clone());
            let h = conv(tape, h, v[5], v[6], self.same.clone());
            Ok(ops::dot_const(tape, h, &self.probe.cast()))
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_cloud(n: usize, extent: i32, rng: &mut ChaCha8Rng) -> Vec<Coord> {
        let mut set = BTreeSet::new();
        while set.len() < n {
            set.insert([
                rng.gen_range(0..extent),
                rng.gen_range(0..extent),
                rng.gen_range(0..extent),
            ]);
        }
        set.into_iter().collect()
    }

    #[test]
    fn offsets_are_z_fastest() {
        let o = kernel_offsets(3);
        assert_eq!(o.len(), 27);
        assert_eq!(o[0], [-1, -1, -1]);
        assert_eq!(o[1], [-1, -1, 0]);
        assert_eq!(o[13], [0, 0, 0]);
        assert_eq!(o[26], [1, 1, 1]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = random_cloud(40, 8, &mut rng);
        let t = SparseTensor::new(coords, rand_tensor(&mut rng, 40, 4), 1).unwrap();
        let mut layer = ConvLayer::zeros(1, 1, 4, 4);
        for c in 0..4 {
            layer.weight.set(c, c, 1.0);
        }
        let out = sparse_conv(&t, &layer).unwrap();
        assert_eq!(out.feats, t.feats);
    }

    #[test]
    fn single_point_uses_center_weight_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = SparseTensor::new(vec![[4, 4, 4]], rand_tensor(&mut rng, 1, 3), 1).unwrap();
        let mut layer = ConvLayer::zeros(3, 1, 3, 2);
        layer.weight = rand_tensor(&mut rng, 27 * 3, 2);
        layer.bias = rand_tensor(&mut rng, 1, 2);
        let out = sparse_conv(&t, &layer).unwrap();
        for co in 0..2 {
            let mut expect = layer.bias.get(0, co);
            for ci in 0..3 {
                expect += t.feats.get(0, ci) * layer.weight.get(13 * 3 + ci, co);
            }
            assert!((out.feats.get(0, co) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn width_mismatch_is_error() {
        let t = SparseTensor::new(vec![[0, 0, 0]], Tensor::zeros(1, 2), 1).unwrap();
        let layer = ConvLayer::zeros(3, 1, 3, 2);
        assert!(matches!(sparse_conv(&t, &layer), Err(Error::Shape(_))));
    }

    /// Direct dense 3D convolution with zero padding.
    fn dense_conv(
        grid: &[Vec<f64>],
        n: i32,
        w: &Tensor,
        b: &Tensor,
        k: i32,
        c_in: usize,
        c_out: usize,
    ) -> Vec<Vec<f64>> {
        let r = k / 2;
        let at = |x: i32, y: i32, z: i32| ((x * n + y) * n + z) as usize;
        let mut out = vec![vec![0.0; c_out]; (n * n * n) as usize];
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let o = &mut out[at(x, y, z)];
                    for co in 0..c_out {
                        o[co] = b.get(0, co) as f64;
                    }
                    for dx in -r..=r {
                        for dy in -r..=r {
                            for dz in -r..=r {
                                let (px, py, pz) = (x + dx, y + dy, z + dz);
                                if px < 0 || py < 0 || pz < 0 || px >= n || py >= n || pz >= n {
                                    continue;
                                }
                                let m = (((dx + r) * k + (dy + r)) * k + (dz + r)) as usize;
                                let f = &grid[at(px, py, pz)];
                                for ci in 0..c_in {
                                    for co in 0..c_out {
                                        o[co] += f[ci] * w.get(m * c_in + ci, co) as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn full_grid_matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let (c_in, c_out) = (3, 4);
        let mut coords = Vec::new();
        let mut grid = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    coords.push([x, y, z]);
                    grid.push(
                        (0..c_in)
                            .map(|_| rng.gen_range(-1.0..1.0))
                            .collect::<Vec<f64>>(),
                    );
                }
            }
        }
        let feats = Tensor::from_rows(
            &grid
                .iter()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect::<Vec<_>>(),
        );
        let grid32: Vec<Vec<f64>> = grid
            .iter()
            .map(|r| r.iter().map(|&v| v as f32 as f64).collect())
            .collect();
        let t = SparseTensor::new(coords, feats, 1).unwrap();
        let mut layer = ConvLayer::zeros(3, 1, c_in, c_out);
        layer.weight = rand_tensor(&mut rng, 27 * c_in, c_out);
        layer.bias = rand_tensor(&mut rng, 1, c_out);
        let out = sparse_conv(&t, &layer).unwrap();
        let dense = dense_conv(&grid32, n, &layer.weight, &layer.bias, 3, c_in, c_out);
        // canonical order equals the x-major loop order used above
        let mut max_err = 0.0f64;
        for (r, d) in dense.iter().enumerate() {
            for co in 0..c_out {
                max_err = max_err.max((out.feats.get(r, co) as f64 - d[co]).abs());
            }
        }
        assert!(max_err <= 1e-5, "max error {max_err}");
    }

    #[test]
    fn down_then_up_restores_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords = random_cloud(120, 16, &mut rng);
        let pyr = GeometryPyramid::build(coords, 1).unwrap();
        let fine = pyr.level(0).unwrap().clone();
        let t =
            SparseTensor::from_parts(fine.clone(), rand_tensor(&mut rng, fine.len(), 2)).unwrap();
        let mut down = ConvLayer::zeros(3, 2, 2, 3);
        down.weight = rand_tensor(&mut rng, 27 * 2, 3);
        let coarse = sparse_conv(&t, &down).unwrap();
        assert_eq!(coarse.coords.coords(), pyr.level(1).unwrap().coords());
        let mut up = ConvLayer::zeros(3, 1, 3, 2);
        up.weight = rand_tensor(&mut rng, 27 * 3, 2);
        let back = sparse_conv_up(&coarse, &up, fine.clone()).unwrap();
        assert_eq!(back.coords.coords(), fine.coords());

        // target must be exactly one level finer
        let level0 = sparse_conv_up(&t, &up.clone(), fine);
        assert!(level0.is_err());
    }

    #[test]
    fn unit_up_conv_replicates_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords = random_cloud(80, 10, &mut rng);
        let pyr = GeometryPyramid::build(coords, 1).unwrap();
        let coarse = pyr.level(1).unwrap().clone();
        let fine = pyr.level(0).unwrap().clone();
        let t = SparseTensor::from_parts(coarse.clone(), rand_tensor(&mut rng, coarse.len(), 3))
            .unwrap();
        let mut layer = ConvLayer::zeros(1, 1, 3, 3);
        for c in 0..3 {
            layer.weight.set(c, c, 1.0);
        }
        let out = sparse_conv_up(&t, &layer, fine.clone()).unwrap();
        for (row, c) in fine.coords().iter().enumerate() {
            let parent = c.map(|v| v.div_euclid(2) * 2);
            assert_eq!(out.feats.row(row), t.feature_at(&parent).unwrap());
        }
    }

    #[test]
    fn up_conv_is_adjoint_of_down_gather() {
        // ⟨up(x), y⟩ = ⟨x, g(y)⟩ with g_q = Σ_m Σ_{p: parent(p) + m·s = q} y_p W_mᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let coords = random_cloud(150, 12, &mut rng);
            let pyr = GeometryPyramid::build(coords, 1).unwrap();
            let coarse = pyr.level(1).unwrap().clone();
            let fine = pyr.level(0).unwrap().clone();
            let (ci, co) = (3, 2);
            let x =
                SparseTensor::from_parts(coarse.clone(), rand_tensor(&mut rng, coarse.len(), ci))
                    .unwrap();
            let y = rand_tensor(&mut rng, fine.len(), co);
            let mut layer = ConvLayer::zeros(3, 1, ci, co);
            layer.weight = rand_tensor(&mut rng, 27 * ci, co);
            let up = sparse_conv_up(&x, &layer, fine.clone()).unwrap();
            let lhs: f64 = up
                .feats
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();

            let offsets = kernel_offsets(3);
            let mut g = vec![vec![0.0f64; ci]; coarse.len()];
            for (p, cp) in fine.coords().iter().enumerate() {
                let parent = cp.map(|v| v.div_euclid(2) * 2);
                for (m, off) in offsets.iter().enumerate() {
                    let q = [
                        parent[0] + 2 * off[0],
                        parent[1] + 2 * off[1],
                        parent[2] + 2 * off[2],
                    ];
                    if let Some(qr) = coarse.coords().iter().position(|c| *c == q) {
                        for a in 0..ci {
                            for b in 0..co {
                                g[qr][a] +=
                                    y.get(p, b) as f64 * layer.weight.get(m * ci + a, b) as f64;
                            }
                        }
                    }
                }
            }
            let rhs: f64 = (0..coarse.len())
                .map(|q| {
                    (0..ci)
                        .map(|a| x.feats.get(q, a) as f64 * g[q][a])
                        .sum::<f64>()
                })
                .sum();
            assert!(
                (lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let coords = random_cloud(30, 5, &mut rng);
            let pyr = GeometryPyramid::build(coords, 1).unwrap();
            let l0 = pyr.level(0).unwrap().clone();
            let l1 = pyr.level(1).unwrap().clone();
            let same = Arc::new(KernelMap::same(&l0, 3));
            let down = Arc::new(KernelMap::down(&l0, &l1, 3).unwrap());
            let up = Arc::new(KernelMap::up(&l1, &l0, 3).unwrap());
            let inputs = vec![
                rand_tensor(&mut rng, l0.len(), 2),
                rand_tensor(&mut rng, 27 * 2, 3),
                rand_tensor(&mut rng, 1, 3),
                rand_tensor(&mut rng, 27 * 3, 2),
                rand_tensor(&mut rng, 1, 2),
                rand_tensor(&mut rng, 27 * 2, 2),
                rand_tensor(&mut rng, 1, 2),
            ];
            let probe = rand_tensor(&mut rng, l0.len(), 2);
            let chain = Chain {
                down: down.clone(),
                up: up.clone(),
                same: same.clone(),
                probe,
            };
            let report =
                check_gradients(&inputs, &chain, &GradCheckOptions::default(), seed).unwrap();
            assert!(report.max_rel_err <= 1e-3, "seed {seed}: {report:?}");
        }
    }
}
