//! Quantization and probability models for the latents.
//!
//! `y` is modeled by a per-element Gaussian whose `(μ, σ)` come from the
//! hyperprior; the side latent `z` by a learned, fully factorized monotone CDF
//! per channel. Rates are `−Σ log₂ p` over integer-bin masses.

use std::f64::consts::{LN_2, SQRT_2};

use rand::Rng;

use crate::diff::{BackwardCtx, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on any bin mass, keeping `log₂ p` finite.
pub const MASS_FLOOR: f64 = 1e-9;
/// Lower bound on Gaussian scales.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Pre-floor negative mass tolerated before a CDF counts as non-monotone.
pub const MONOTONE_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(−½, ½)` noise.
    Train,
    /// Round half away from zero.
    Eval,
}

/// `U(−½, ½)` noise of the given shape.
pub fn uniform_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-0.5f32..0.5))
            .collect(),
    )
}

pub fn quantize<R: Rng>(x: &Tensor, mode: QuantMode, rng: &mut R) -> Tensor {
    match mode {
        QuantMode::Eval => x.map(f32::round),
        QuantMode::Train => {
            let mut out = uniform_noise(x.rows(), x.cols(), rng);
            out.add_assign(x);
            out
        }
    }
}

#[inline]
fn std_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ(hi) − Φ(lo)` for `lo ≤ hi`, accurate in both tails.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        0.5 * (libm::erfc(lo / SQRT_2) - libm::erfc(hi / SQRT_2))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi / SQRT_2) - libm::erfc(-lo / SQRT_2))
    } else {
        1.0 - 0.5 * (libm::erfc(-lo / SQRT_2) + libm::erfc(hi / SQRT_2))
    }
}

/// Mass of the unit bin around `y` under `N(μ, σ²)`, before flooring.
pub fn gaussian_bin(y: f64, mu: f64, sigma: f64) -> f64 {
    let d = y - mu;
    normal_interval((d - 0.5) / sigma, (d + 0.5) / sigma)
}

/// Floored bin mass used for rates.
pub fn gaussian_mass_value(y: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_bin(y, mu, sigma).max(MASS_FLOOR)
}

/// Elementwise Gaussian bin masses of `y` given `mu` and `sigma`.
pub fn gaussian_mass<T: Real>(tape: &mut Tape<T>, y: Var, mu: Var, sigma: Var) -> Var {
    let (yv, mv, sv) = (tape.value(y), tape.value(mu), tape.value(sigma));
    assert_eq!(yv.shape(), mv.shape(), "gaussian_mass: mean shape");
    assert_eq!(yv.shape(), sv.shape(), "gaussian_mass: scale shape");
    let data = yv
        .data()
        .iter()
        .zip(mv.data())
        .zip(sv.data())
        .map(|((&y, &m), &s)| T::of(gaussian_mass_value(y.f64(), m.f64(), s.f64())))
        .collect();
    let out = Tensor::from_vec(yv.rows(), yv.cols(), data);
    tape.push_op(
        &[y, mu, sigma],
        out,
        Box::new(|ctx: &BackwardCtx<T>| {
            let (y, m, s) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
            let n = y.len();
            let (mut gy, mut gs) = (vec![T::zero(); n], vec![T::zero(); n]);
            for e in 0..n {
                let g = ctx.grad.data()[e].f64();
                let (yy, mm, ss) = (y.data()[e].f64(), m.data()[e].f64(), s.data()[e].f64());
                if g == 0.0 || gaussian_bin(yy, mm, ss) < MASS_FLOOR {
                    continue;
                }
                let a = (yy - mm + 0.5) / ss;
                let b = (yy - mm - 0.5) / ss;
                let (pa, pb) = (std_pdf(a), std_pdf(b));
                gy[e] = T::of(g * (pa - pb) / ss);
                gs[e] = T::of(g * (b * pb - a * pa) / ss);
            }
            let gm: Vec<T> = gy.iter().map(|&v| -v).collect();
            let (r, c) = y.shape();
            vec![
                Some(Tensor::from_vec(r, c, gy)),
                Some(Tensor::from_vec(r, c, gm)),
                Some(Tensor::from_vec(r, c, gs)),
            ]
        }),
    )
}

/// `−Σ log₂ p` over a tensor of masses, as a 64-bit scalar.
pub fn bits<T: Real>(tape: &mut Tape<T>, masses: Var) -> Var {
    let b = estimate_rate(tape.value(masses).data().iter().map(|p| p.f64()));
    tape.push_scalar_op(
        &[masses],
        b,
        Box::new(|ctx: &BackwardCtx<T>| {
            let k = -ctx.grad.item().f64() / LN_2;
            vec![Some(ctx.inputs[0].map(|p| T::of(k / p.f64())))]
        }),
    )
}

/// `−Σ log₂ p`.
pub fn estimate_rate(masses: impl IntoIterator<Item = f64>) -> f64 {
    -masses.into_iter().map(f64::log2).sum::<f64>()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Raw parameters of one channel's CDF network, read from the store layout.
#[derive(Clone, Copy, Debug, Default)]
struct Channel {
    h1: [f64; 3],
    b1: [f64; 3],
    a1: [f64; 3],
    h2: [f64; 9],
    b2: [f64; 3],
    a2: [f64; 3],
    h3: [f64; 3],
    b3: f64,
}

/// Intermediate values of one logit evaluation, kept for the backward pass.
#[derive(Clone, Copy, Debug, Default)]
struct Trace {
    x: f64,
    u1: [f64; 3],
    h1: [f64; 3],
    u2: [f64; 3],
    h2: [f64; 3],
    logit: f64,
}

/// Per-channel gradient accumulators, same layout as [`Channel`].
#[derive(Clone, Copy, Debug, Default)]
struct ChannelGrad {
    h1: [f64; 3],
    b1: [f64; 3],
    a1: [f64; 3],
    h2: [f64; 9],
    b2: [f64; 3],
    a2: [f64; 3],
    h3: [f64; 3],
    b3: f64,
}

impl Channel {
    fn from_slices(p: &[&[f64]; 8]) -> Self {
        let mut c = Channel::default();
        c.h1.copy_from_slice(p[0]);
        c.b1.copy_from_slice(p[1]);
        c.a1.copy_from_slice(p[2]);
        c.h2.copy_from_slice(p[3]);
        c.b2.copy_from_slice(p[4]);
        c.a2.copy_from_slice(p[5]);
        c.h3.copy_from_slice(p[6]);
        c.b3 = p[7][0];
        c
    }

    fn forward(&self, x: f64) -> Trace {
        let mut t = Trace {
            x,
            ..Trace::default()
        };
        for i in 0..3 {
            t.u1[i] = softplus(self.h1[i]) * x + self.b1[i];
            t.h1[i] = t.u1[i] + libm::tanh(self.a1[i]) * libm::tanh(t.u1[i]);
        }
        for i in 0..3 {
            let mut u = self.b2[i];
            for j in 0..3 {
                u += softplus(self.h2[i * 3 + j]) * t.h1[j];
            }
            t.u2[i] = u;
            t.h2[i] = u + libm::tanh(self.a2[i]) * libm::tanh(u);
        }
        t.logit = self.b3;
        for j in 0..3 {
            t.logit += softplus(self.h3[j]) * t.h2[j];
        }
        t
    }

    /// Accumulates `dl · ∂logit/∂·` into `g`; returns `∂logit/∂x · dl`.
    fn backward(&self, t: &Trace, dl: f64, g: &mut ChannelGrad) -> f64 {
        let mut dh2 = [0.0; 3];
        for j in 0..3 {
            dh2[j] = dl * softplus(self.h3[j]);
            g.h3[j] += dl * t.h2[j] * sigmoid(self.h3[j]);
        }
        g.b3 += dl;
        let mut dh1 = [0.0; 3];
        for i in 0..3 {
            let (ta, tu) = (libm::tanh(self.a2[i]), libm::tanh(t.u2[i]));
            let du = dh2[i] * (1.0 + ta * (1.0 - tu * tu));
            g.a2[i] += dh2[i] * tu * (1.0 - ta * ta);
            g.b2[i] += du;
            for j in 0..3 {
                let h = self.h2[i * 3 + j];
                g.h2[i * 3 + j] += du * t.h1[j] * sigmoid(h);
                dh1[j] += du * softplus(h);
            }
        }
        let mut dx = 0.0;
        for i in 0..3 {
            let (ta, tu) = (libm::tanh(self.a1[i]), libm::tanh(t.u1[i]));
            let du = dh1[i] * (1.0 + ta * (1.0 - tu * tu));
            g.a1[i] += dh1[i] * tu * (1.0 - ta * ta);
            g.b1[i] += du;
            g.h1[i] += du * t.x * sigmoid(self.h1[i]);
            dx += du * softplus(self.h1[i]);
        }
        dx
    }
}

/// Bin mass from the two bin-edge logits, evaluated on the side of the
/// sigmoid where it does not saturate. Returns the signed pre-floor mass and
/// the partial derivatives with respect to the upper and lower logits.
fn mass_from_logits(upper: f64, lower: f64) -> (f64, f64, f64) {
    let s = if upper + lower > 0.0 { -1.0 } else { 1.0 };
    let (su, sl) = (sigmoid(s * upper), sigmoid(s * lower));
    (s * (su - sl), su * (1.0 - su), -sl * (1.0 - sl))
}

/// Floored mass, or an error when the bin mass is clearly negative.
fn checked_mass(upper: f64, lower: f64, channel: usize, x: f64) -> Result<f64> {
    let m = mass_from_logits(upper, lower).0;
    if m < -MONOTONE_TOL {
        return Err(Error::Entropy(format!(
            "channel {channel} CDF is not monotone at {x}: bin mass {m:e}"
        )));
    }
    Ok(m.max(MASS_FLOOR))
}

/// Learned per-channel monotone CDF (three monotone layers, widths 1→3→3→1).
#[derive(Clone, Copy, Debug)]
pub struct FactorizedModel {
    pub channels: usize,
    /// `h1, b1, a1, h2, b2, a2, h3, b3`; one row per channel.
    pub params: [ParamId; 8],
}

const WIDTHS: [usize; 8] = [3, 3, 3, 9, 3, 3, 3, 1];
const NAMES: [&str; 8] = ["h1", "b1", "a1", "h2", "b2", "a2", "h3", "b3"];

impl FactorizedModel {
    /// Matrices start at `softplus⁻¹(1 / (scale · fan_out))` with
    /// `scale = init_scale^(1/4)`; biases are `U(−½, ½)`; gates start at zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = init_scale.powf(0.25);
        let filters = [1usize, 3, 3, 1];
        let matrix_init = |layer: usize| {
            let v = 1.0 / scale / filters[layer + 1] as f64;
            (v.exp_m1()).ln() as f32
        };
        let mut ids = Vec::with_capacity(8);
        for (k, (&w, n)) in WIDTHS.iter().zip(NAMES).enumerate() {
            let t = match k {
                0 | 3 | 6 => Tensor::filled(channels, w, matrix_init(k / 3)),
                2 | 5 => Tensor::zeros(channels, w),
                _ => Tensor::from_vec(
                    channels,
                    w,
                    (0..channels * w)
                        .map(|_| rng.gen_range(-0.5f32..0.5))
                        .collect(),
                ),
            };
            ids.push(store.insert(format!("{name}.{n}"), t)?);
        }
        Ok(FactorizedModel {
            channels,
            params: ids.try_into().expect("eight parameter tensors"),
        })
    }

    fn channel(&self, values: &[&Tensor<f64>; 8], c: usize) -> Channel {
        Channel::from_slices(&std::array::from_fn(|k| values[k].row(c)))
    }

    fn channels_f64(&self, store: &ParamStore) -> Vec<Channel> {
        let values: Vec<Tensor<f64>> = self
            .params
            .iter()
            .map(|&id| store.value(id).cast())
            .collect();
        let refs: [&Tensor<f64>; 8] = std::array::from_fn(|k| &values[k]);
        (0..self.channels).map(|c| self.channel(&refs, c)).collect()
    }

    /// `F_c(x)`.
    pub fn cdf(&self, store: &ParamStore, c: usize, x: f64) -> f64 {
        let ch = self.channels_f64(store)[c];
        sigmoid(ch.forward(x).logit)
    }

    /// Evaluator with the parameters converted once, for table building.
    pub fn evaluator(&self, store: &ParamStore) -> FactorizedEval {
        FactorizedEval {
            channels: self.channels_f64(store),
        }
    }

    /// Elementwise floored bin masses of `z` (`n × channels`).
    pub fn mass<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, z: Var) -> Result<Var> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|&id| tape.param(store, id))
            .collect();
        factorized_mass(tape, z, &params.try_into().expect("eight params"))
    }
}

/// Frozen copy of a [`FactorizedModel`] in 64-bit.
#[derive(Clone, Debug)]
pub struct FactorizedEval {
    channels: Vec<Channel>,
}

impl FactorizedEval {
    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.channels[c].forward(x).logit)
    }

    /// Pre-floor mass of the bin around `k`.
    pub fn bin(&self, c: usize, k: f64) -> f64 {
        let ch = &self.channels[c];
        mass_from_logits(ch.forward(k + 0.5).logit, ch.forward(k - 0.5).logit).0
    }
}

/// Bin masses of `z` under the factorized CDF whose parameter tensors are
/// `p = [h1, b1, a1, h2, b2, a2, h3, b3]`, each with one row per channel.
pub fn factorized_mass<T: Real>(tape: &mut Tape<T>, z: Var, p: &[Var; 8]) -> Result<Var> {
    let zv = tape.value(z);
    let (n, channels) = zv.shape();
    for (k, &v) in p.iter().enumerate() {
        if tape.value(v).shape() != (channels, WIDTHS[k]) {
            return Err(Error::Shape(format!(
                "factorized parameter {} has shape {:?}, expected {:?}",
                NAMES[k],
                tape.value(v).shape(),
                (channels, WIDTHS[k])
            )));
        }
    }
    let values: Vec<Tensor<f64>> = p.iter().map(|&v| tape.value(v).cast()).collect();
    let refs: [&Tensor<f64>; 8] = std::array::from_fn(|k| &values[k]);
    let chans: Vec<Channel> = (0..channels)
        .map(|c| Channel::from_slices(&std::array::from_fn(|k| refs[k].row(c))))
        .collect();
    let mut out = Vec::with_capacity(n * channels);
    for r in 0..n {
        for (c, ch) in chans.iter().enumerate() {
            let x = zv.get(r, c).f64();
            let m = checked_mass(ch.forward(x + 0.5).logit, ch.forward(x - 0.5).logit, c, x)?;
            out.push(T::of(m));
        }
    }
    let out = Tensor::from_vec(n, channels, out);
    let mut inputs = vec![z];
    inputs.extend_from_slice(p);
    Ok(tape.push_op(
        &inputs,
        out,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let z = ctx.inputs[0];
            let (n, channels) = z.shape();
            let mut gz = vec![T::zero(); n * channels];
            let mut grads = vec![ChannelGrad::default(); channels];
            let need_params = ctx.needs[1..].iter().any(|&b| b);
            for r in 0..n {
                for (c, ch) in chans.iter().enumerate() {
                    let g = ctx.grad.get(r, c).f64();
                    if g == 0.0 {
                        continue;
                    }
                    let x = z.get(r, c).f64();
                    let up = ch.forward(x + 0.5);
                    let lo = ch.forward(x - 0.5);
                    let (m, du, dl) = mass_from_logits(up.logit, lo.logit);
                    if m < MASS_FLOOR {
                        continue;
                    }
                    let mut scratch = ChannelGrad::default();
                    let acc = if need_params {
                        &mut grads[c]
                    } else {
                        &mut scratch
                    };
                    let dx = ch.backward(&up, g * du, acc) + ch.backward(&lo, g * dl, acc);
                    gz[r * channels + c] = T::of(dx);
                }
            }
            let mut out = vec![ctx.needs[0].then(|| Tensor::from_vec(n, channels, gz))];
            for k in 0..8 {
                out.push(ctx.needs[k + 1].then(|| {
                    let w = WIDTHS[k];
                    let mut data = Vec::with_capacity(channels * w);
                    for g in &grads {
                        let src: &[f64] = match k {
                            0 => &g.h1,
                            1 => &g.b1,
                            2 => &g.a1,
                            3 => &g.h2,
                            4 => &g.b2,
                            5 => &g.a2,
                            6 => &g.h3,
                            _ => std::slice::from_ref(&g.b3),
                        };
                        data.extend(src.iter().map(|&v| T::of(v)));
                    }
                    Tensor::from_vec(channels, w, data)
                }));
            }
            out
        }),
    ))
}
