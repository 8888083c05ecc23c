//! Image quality metrics and Bjøntegaard delta rate.

use nalgebra::{DMatrix, DVector};

use crate::diff::{BackwardCtx, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::render::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Y,
    U,
    V,
    Rgb,
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// BT.709 full-range `(Y, U, V)`; chroma in `[−½, ½]`.
pub fn rgb_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    [y, (b - y) / 1.8556, (r - y) / 1.5748]
}

/// `10·log₁₀(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn mse(a: &Image, b: &Image, channel: Channel) -> Result<f64> {
    check_same(a, b)?;
    let n = a.width * a.height;
    if n == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (pa, pb) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)) {
        let fa = [pa[0] as f64, pa[1] as f64, pa[2] as f64];
        let fb = [pb[0] as f64, pb[1] as f64, pb[2] as f64];
        s += match channel {
            Channel::Rgb => (0..3).map(|k| (fa[k] - fb[k]).powi(2)).sum::<f64>() / 3.0,
            c => {
                let k = match c {
                    Channel::Y => 0,
                    Channel::U => 1,
                    _ => 2,
                };
                (rgb_to_yuv(fa)[k] - rgb_to_yuv(fb)[k]).powi(2)
            }
        };
    }
    Ok(s / n as f64)
}

pub fn psnr(a: &Image, b: &Image, channel: Channel) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, channel)?))
}

/// `(6·Y + U + V) / 8` from per-channel PSNRs.
pub fn yuv611(y: f64, u: f64, v: f64) -> f64 {
    (6.0 * y + u + v) / 8.0
}

pub fn yuv_psnr_611(a: &Image, b: &Image) -> Result<f64> {
    Ok(yuv611(
        psnr(a, b, Channel::Y)?,
        psnr(a, b, Channel::U)?,
        psnr(a, b, Channel::V)?,
    ))
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Scales used for an image whose smaller side is `min_dim`: the most (up to
/// five) for which the coarsest scale still fits `11·2⁴ = 176`-style sizing.
pub fn ms_ssim_scales(min_dim: usize) -> usize {
    let mut m = 1;
    while m < 5 && min_dim >= WINDOW << m {
        m += 1;
    }
    m
}

/// Single-channel plane.
#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            v: vec![0.0; w * h],
        }
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }

    /// 2×2 mean pooling; odd trailing rows/columns are dropped.
    fn pool(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = Plane::zeros(w, h);
        for j in 0..h {
            for i in 0..w {
                let s = self.v[2 * j * self.w + 2 * i]
                    + self.v[2 * j * self.w + 2 * i + 1]
                    + self.v[(2 * j + 1) * self.w + 2 * i]
                    + self.v[(2 * j + 1) * self.w + 2 * i + 1];
                out.v[j * w + i] = 0.25 * s;
            }
        }
        out
    }

    fn pool_adjoint(g: &Plane, w: usize, h: usize) -> Plane {
        let mut out = Plane::zeros(w, h);
        for j in 0..g.h {
            for i in 0..g.w {
                let v = 0.25 * g.v[j * g.w + i];
                out.v[2 * j * w + 2 * i] += v;
                out.v[2 * j * w + 2 * i + 1] += v;
                out.v[(2 * j + 1) * w + 2 * i] += v;
                out.v[(2 * j + 1) * w + 2 * i + 1] += v;
            }
        }
        out
    }

    /// Separable Gaussian filter, valid region only.
    fn filter(&self, g: &[f64; WINDOW]) -> Plane {
        let (ow, oh) = (self.w + 1 - WINDOW, self.h + 1 - WINDOW);
        let mut tmp = Plane::zeros(ow, self.h);
        for j in 0..self.h {
            let row = &self.v[j * self.w..(j + 1) * self.w];
            for i in 0..ow {
                tmp.v[j * ow + i] = (0..WINDOW).map(|k| g[k] * row[i + k]).sum();
            }
        }
        let mut out = Plane::zeros(ow, oh);
        for j in 0..oh {
            for i in 0..ow {
                out.v[j * ow + i] = (0..WINDOW).map(|k| g[k] * tmp.v[(j + k) * ow + i]).sum();
            }
        }
        out
    }

    /// Adjoint of [`Plane::filter`] back onto a `w × h` plane.
    fn filter_adjoint(gm: &Plane, g: &[f64; WINDOW], w: usize, h: usize) -> Plane {
        let (ow, oh) = (gm.w, gm.h);
        let mut tmp = Plane::zeros(ow, h);
        for j in 0..oh {
            for i in 0..ow {
                let v = gm.v[j * ow + i];
                for k in 0..WINDOW {
                    tmp.v[(j + k) * ow + i] += g[k] * v;
                }
            }
        }
        let mut out = Plane::zeros(w, h);
        for j in 0..h {
            for i in 0..ow {
                let v = tmp.v[j * ow + i];
                for k in 0..WINDOW {
                    out.v[j * w + i + k] += g[k] * v;
                }
            }
        }
        out
    }
}

/// Per-scale statistics of one channel.
struct ScaleStats {
    x: Plane,
    y: Plane,
    mx: Plane,
    my: Plane,
    /// Local `l` and `cs` maps.
    l: Vec<f64>,
    cs: Vec<f64>,
    sxx: Plane,
    syy: Plane,
}

fn scale_stats(x: Plane, y: Plane, g: &[f64; WINDOW]) -> ScaleStats {
    let mx = x.filter(g);
    let my = y.filter(g);
    let exx = x.mul(&x).filter(g);
    let eyy = y.mul(&y).filter(g);
    let exy = x.mul(&y).filter(g);
    let n = mx.v.len();
    let mut l = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    let mut sxx = Plane::zeros(mx.w, mx.h);
    let mut syy = Plane::zeros(mx.w, mx.h);
    for k in 0..n {
        let (a, b) = (mx.v[k], my.v[k]);
        let vx = exx.v[k] - a * a;
        let vy = eyy.v[k] - b * b;
        let cxy = exy.v[k] - a * b;
        sxx.v[k] = vx;
        syy.v[k] = vy;
        l.push((2.0 * a * b + C1) / (a * a + b * b + C1));
        cs.push((2.0 * cxy + C2) / (vx + vy + C2));
    }
    ScaleStats {
        x,
        y,
        mx,
        my,
        l,
        cs,
        sxx,
        syy,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// MS-SSIM of one channel and, on request, its gradient with respect to `y`.
fn ms_ssim_plane(x: Plane, y: Plane, want_grad: bool) -> (f64, Option<Plane>) {
    let g = gaussian_window();
    let m = ms_ssim_scales(x.w.min(x.h));
    let wsum: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..m].iter().map(|w| w / wsum).collect();
    let mut stats = Vec::with_capacity(m);
    let (mut cx, mut cy) = (x, y);
    for s in 0..m {
        let (nx, ny) = if s + 1 < m {
            (cx.pool(), cy.pool())
        } else {
            (Plane::zeros(0, 0), Plane::zeros(0, 0))
        };
        stats.push(scale_stats(cx, cy, &g));
        cx = nx;
        cy = ny;
    }
    // Factor per scale: mean cs, except the last which is mean l·cs.
    let factors: Vec<f64> = stats
        .iter()
        .enumerate()
        .map(|(s, st)| {
            if s + 1 < m {
                mean(&st.cs)
            } else {
                mean(
                    &st.l
                        .iter()
                        .zip(&st.cs)
                        .map(|(a, b)| a * b)
                        .collect::<Vec<_>>(),
                )
            }
        })
        .collect();
    let score: f64 = factors
        .iter()
        .zip(&weights)
        .map(|(f, w)| f.max(0.0).powf(*w))
        .product();
    if !want_grad {
        return (score, None);
    }
    let mut grad: Option<Plane> = None;
    for s in (0..m).rev() {
        let st = &stats[s];
        let f = factors[s];
        let (w, h) = (st.y.w, st.y.h);
        let mut gy = Plane::zeros(w, h);
        if f > 0.0 && score > 0.0 {
            let df = weights[s] * score / f;
            let n = st.cs.len() as f64;
            let last = s + 1 == m;
            let (mut g_mu, mut g_yy, mut g_xy) = (
                Plane::zeros(st.mx.w, st.mx.h),
                Plane::zeros(st.mx.w, st.mx.h),
                Plane::zeros(st.mx.w, st.mx.h),
            );
            for k in 0..st.cs.len() {
                let (a, b) = (st.mx.v[k], st.my.v[k]);
                let d = st.sxx.v[k] + st.syy.v[k] + C2;
                let cs = st.cs[k];
                // Partials of cs with respect to μy, E[y²], E[xy].
                let dcs_mu = (-2.0 * a + 2.0 * b * cs) / d;
                let dcs_yy = -cs / d;
                let dcs_xy = 2.0 / d;
                let (c_mu, c_yy, c_xy) = if last {
                    let l = st.l[k];
                    let dl_mu = (2.0 * a - 2.0 * b * l) / (a * a + b * b + C1);
                    (l * dcs_mu + cs * dl_mu, l * dcs_yy, l * dcs_xy)
                } else {
                    (dcs_mu, dcs_yy, dcs_xy)
                };
                g_mu.v[k] = df * c_mu / n;
                g_yy.v[k] = df * c_yy / n;
                g_xy.v[k] = df * c_xy / n;
            }
            let a_mu = Plane::filter_adjoint(&g_mu, &g, w, h);
            let a_yy = Plane::filter_adjoint(&g_yy, &g, w, h);
            let a_xy = Plane::filter_adjoint(&g_xy, &g, w, h);
            for k in 0..w * h {
                gy.v[k] = a_mu.v[k] + 2.0 * st.y.v[k] * a_yy.v[k] + st.x.v[k] * a_xy.v[k];
            }
        }
        if let Some(coarse) = grad.take() {
            let up = Plane::pool_adjoint(&coarse, w, h);
            for (a, b) in gy.v.iter_mut().zip(&up.v) {
                *a += b;
            }
        }
        grad = Some(gy);
    }
    (score, grad)
}

fn planes_of(data: &[f64], w: usize, h: usize) -> [Plane; 3] {
    std::array::from_fn(|c| Plane {
        w,
        h,
        v: data.iter().skip(c).step_by(3).copied().collect(),
    })
}

fn check_ms_ssim_size(w: usize, h: usize) -> Result<()> {
    if w < WINDOW || h < WINDOW {
        return Err(Error::Shape(format!(
            "MS-SSIM needs images of at least {WINDOW}x{WINDOW}, got {w}x{h}"
        )));
    }
    Ok(())
}

/// MS-SSIM averaged over the R, G and B channels.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    check_ms_ssim_size(a.width, a.height)?;
    let to64 = |im: &Image| im.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let pa = planes_of(&to64(a), a.width, a.height);
    let pb = planes_of(&to64(b), b.width, b.height);
    let s: f64 = pa
        .into_iter()
        .zip(pb)
        .map(|(x, y)| ms_ssim_plane(x, y, false).0)
        .sum();
    Ok(s / 3.0)
}

/// `1 − MS-SSIM(reference, image)` for an image var of shape `(H·W) × 3`.
pub fn ms_ssim_loss<T: Real>(tape: &mut Tape<T>, image: Var, reference: &Image) -> Result<Var> {
    let (w, h) = (reference.width, reference.height);
    if tape.value(image).shape() != (w * h, 3) {
        return Err(Error::Shape(format!(
            "image var has shape {:?}, reference is {w}x{h}",
            tape.value(image).shape()
        )));
    }
    check_ms_ssim_size(w, h)?;
    let rx: Vec<f64> = reference.data.iter().map(|&v| v as f64).collect();
    let ry: Vec<f64> = tape.value(image).data().iter().map(|v| v.f64()).collect();
    let (px, py) = (planes_of(&rx, w, h), planes_of(&ry, w, h));
    let mut score = 0.0;
    let mut grad = vec![0.0; w * h * 3];
    for (c, (x, y)) in px.into_iter().zip(py).enumerate() {
        let (s, g) = ms_ssim_plane(x, y, true);
        score += s / 3.0;
        for (k, v) in g.expect("gradient requested").v.into_iter().enumerate() {
            grad[k * 3 + c] = -v / 3.0;
        }
    }
    Ok(tape.push_scalar_op(
        &[image],
        1.0 - score,
        Box::new(move |ctx: &BackwardCtx<T>| {
            let g = ctx.grad.item().f64();
            vec![Some(Tensor::from_vec(
                w * h,
                3,
                grad.iter().map(|&v| T::of(g * v)).collect(),
            ))]
        }),
    ))
}

/// One rate-distortion point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub rate: f64,
    pub quality: f64,
}

/// Least-squares cubic `ln(rate) ≈ Σ cₖ qᵏ`.
fn fit_log_rate(curve: &[RdPoint]) -> Result<[f64; 4]> {
    let n = curve.len();
    let a = DMatrix::from_fn(n, 4, |i, k| curve[i].quality.powi(k as i32));
    let b = DVector::from_iterator(n, curve.iter().map(|p| p.rate.ln()));
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Invalid(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let f =
        |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    f(hi) - f(lo)
}

fn check_curve(c: &[RdPoint], name: &str) -> Result<()> {
    if c.len() < 4 {
        return Err(Error::Invalid(format!(
            "{name} has {} points, need at least 4",
            c.len()
        )));
    }
    if c.iter()
        .any(|p| !(p.rate > 0.0 && p.rate.is_finite() && p.quality.is_finite()))
    {
        return Err(Error::Invalid(format!(
            "{name} has a non-positive or non-finite point"
        )));
    }
    let mut sorted = c.to_vec();
    sorted.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    let increasing = sorted.windows(2).all(|w| w[1].quality > w[0].quality);
    if !increasing {
        return Err(Error::Invalid(format!(
            "{name} quality is not monotone in rate"
        )));
    }
    Ok(())
}

/// Average rate difference of `b` relative to `a` at equal quality, in percent.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    check_curve(a, "curve a")?;
    check_curve(b, "curve b")?;
    let range = |c: &[RdPoint]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.quality), hi.max(p.quality))
            })
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(hi > lo) {
        return Err(Error::Invalid(format!(
            "quality ranges [{alo}, {ahi}] and [{blo}, {bhi}] do not overlap"
        )));
    }
    let (ca, cb) = (fit_log_rate(a)?, fit_log_rate(b)?);
    let avg = (poly_integral(&cb, lo, hi) - poly_integral(&ca, lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{check_gradients, GradCheckOptions, Objective};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    /// Smooth image plus noise, so that MS-SSIM lands mid-range.
    fn textured_pair(rng: &mut ChaCha8Rng, w: usize, h: usize, noise: f32) -> (Image, Image) {
        let mut a = Image::filled(w, h, [0.0; 3]);
        let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
        for j in 0..h {
            for i in 0..w {
                for c in 0..3 {
                    let v = 0.5 + 0.4 * ((i as f32 * fx + c as f32).sin() * (j as f32 * fy).cos());
                    a.data[(j * w + i) * 3 + c] = v;
                }
            }
        }
        let mut b = a.clone();
        for v in &mut b.data {
            *v = (*v + rng.gen_range(-noise..noise)).clamp(0.0, 1.0);
        }
        (a, b)
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0), 99.0);
        assert_eq!(psnr_from_mse(1e-30), 99.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(&mut rng, 8, 8);
        assert_eq!(psnr(&a, &a, Channel::Y).unwrap(), 99.0);
    }

    #[test]
    fn yuv611_weighting() {
        assert_eq!(yuv611(40.0, 30.0, 30.0), 37.5);
    }

    #[test]
    fn luma_error_of_gray_shift() {
        // A uniform gray offset of 1/8 changes Y by exactly 1/8 and leaves U, V.
        let a = Image::filled(4, 4, [0.25; 3]);
        let b = Image::filled(4, 4, [0.375; 3]);
        assert!((mse(&a, &b, Channel::Y).unwrap() - 0.015625).abs() < 1e-12);
        assert!(mse(&a, &b, Channel::U).unwrap() < 1e-12);
        assert!((psnr(&a, &b, Channel::Y).unwrap() - 10.0 * 64f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_errors() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 5, [0.0; 3]);
        assert!(psnr(&a, &b, Channel::Rgb).is_err());
        assert!(ms_ssim(&a, &b).is_err());
    }

    #[test]
    fn scale_count_follows_size() {
        assert_eq!(ms_ssim_scales(176), 5);
        assert_eq!(ms_ssim_scales(175), 4);
        assert_eq!(ms_ssim_scales(128), 4);
        assert_eq!(ms_ssim_scales(11), 1);
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for size in [16, 64, 200] {
            let a = random_image(&mut rng, size, size + 3);
            assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_image(&mut rng, 40, 40);
            let b = random_image(&mut rng, 40, 40);
            let s = ms_ssim(&a, &b).unwrap();
            assert!((0.0..=1.0).contains(&s), "{s}");
        }
    }

    /// Direct 2-D window sums and explicit pooling, written independently.
    fn reference_ms_ssim(a: &Image, b: &Image) -> f64 {
        let mut win = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                total += *v;
            }
        }
        let weights_all = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
        let mut out = 0.0;
        for c in 0..3 {
            let mut x: Vec<Vec<f64>> = (0..a.height)
                .map(|j| (0..a.width).map(|i| a.pixel(i, j)[c] as f64).collect())
                .collect();
            let mut y: Vec<Vec<f64>> = (0..b.height)
                .map(|j| (0..b.width).map(|i| b.pixel(i, j)[c] as f64).collect())
                .collect();
            let mut scales = 1;
            while scales < 5 && a.width.min(a.height) >= 11 * (1 << scales) {
                scales += 1;
            }
            let wsum: f64 = weights_all[..scales].iter().sum();
            let mut score = 1.0;
            for s in 0..scales {
                let (h, w) = (x.len(), x[0].len());
                let (mut cs_sum, mut ssim_sum, mut count) = (0.0, 0.0, 0.0);
                for j in 0..=h - 11 {
                    for i in 0..=w - 11 {
                        let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for dj in 0..11 {
                            for di in 0..11 {
                                let g = win[dj][di] / total;
                                let (p, q) = (x[j + dj][i + di], y[j + dj][i + di]);
                                mx += g * p;
                                my += g * q;
                                xx += g * p * p;
                                yy += g * q * q;
                                xy += g * p * q;
                            }
                        }
                        let cs = (2.0 * (xy - mx * my) + C2) / (xx - mx * mx + yy - my * my + C2);
                        let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
                        cs_sum += cs;
                        ssim_sum += l * cs;
                        count += 1.0;
                    }
                }
                let f: f64 = if s + 1 == scales {
                    ssim_sum / count
                } else {
                    cs_sum / count
                };
                score *= f.max(0.0).powf(weights_all[s] / wsum);
                let half = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    (0..m.len() / 2)
                        .map(|j| {
                            (0..m[0].len() / 2)
                                .map(|i| {
                                    (m[2 * j][2 * i]
                                        + m[2 * j][2 * i + 1]
                                        + m[2 * j + 1][2 * i]
                                        + m[2 * j + 1][2 * i + 1])
                                        / 4.0
                                })
                                .collect()
                        })
                        .collect()
                };
                x = half(&x);
                y = half(&y);
            }
            out += score / 3.0;
        }
        out
    }

    #[test]
    fn matches_direct_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..10 {
            let (w, h) = [(48, 40), (96, 90), (180, 176)][k % 3];
            let (a, b) = textured_pair(&mut rng, w, h, 0.05 + 0.03 * k as f32);
            let fast = ms_ssim(&a, &b).unwrap();
            let slow = reference_ms_ssim(&a, &b);
            assert!((fast - slow).abs() < 1e-4, "{fast} vs {slow}");
        }
    }

    struct LossObjective(Image);

    impl Objective for LossObjective {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
            ms_ssim_loss(tape, v[0], &self.0)
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let (a, b) = textured_pair(&mut rng, 48, 46, 0.1);
            let report = check_gradients(
                &[b.to_tensor()],
                &LossObjective(a),
                &GradCheckOptions::default(),
                seed,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-3, "seed {seed}: {report:?}");
        }
    }

    fn curve(points: &[(f64, f64)]) -> Vec<RdPoint> {
        points
            .iter()
            .map(|&(rate, quality)| RdPoint { rate, quality })
            .collect()
    }

    #[test]
    fn bd_rate_identity_and_doubling() {
        let a = curve(&[
            (0.1, 30.0),
            (0.2, 33.0),
            (0.4, 35.5),
            (0.8, 37.0),
            (1.6, 38.2),
        ]);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let b: Vec<RdPoint> = a
            .iter()
            .map(|p| RdPoint {
                rate: 2.0 * p.rate,
                ..*p
            })
            .collect();
        assert!((bd_rate(&a, &b).unwrap() - 100.0).abs() < 0.1);
    }

    #[test]
    fn bd_rate_errors() {
        let a = curve(&[(0.1, 30.0), (0.2, 31.0), (0.4, 32.0), (0.8, 33.0)]);
        let far = curve(&[(0.1, 40.0), (0.2, 41.0), (0.4, 42.0), (0.8, 43.0)]);
        assert!(bd_rate(&a, &far).is_err());
        assert!(bd_rate(&a[..3], &a).is_err());
        let bumpy = curve(&[(0.1, 30.0), (0.2, 29.0), (0.4, 32.0), (0.8, 33.0)]);
        assert!(bd_rate(&bumpy, &a).is_err());
    }

    fn random_curve(rng: &mut ChaCha8Rng) -> Vec<RdPoint> {
        let mut rate: f64 = rng.gen_range(0.05..0.2);
        let mut q: f64 = rng.gen_range(26.0..30.0);
        (0..rng.gen_range(4..7))
            .map(|_| {
                rate *= rng.gen_range(1.4..2.2);
                q += rng.gen_range(1.0..3.0);
                RdPoint { rate, quality: q }
            })
            .collect()
    }

    /// Cubic fit by normal equations and Gaussian elimination, then dense
    /// trapezoid integration.
    fn oracle_bd_rate(a: &[RdPoint], b: &[RdPoint]) -> f64 {
        let fit = |c: &[RdPoint]| -> [f64; 4] {
            let mut m = [[0.0f64; 5]; 4];
            for p in c {
                let pw: Vec<f64> = (0..4).map(|k| p.quality.powi(k)).collect();
                for r in 0..4 {
                    for s in 0..4 {
                        m[r][s] += pw[r] * pw[s];
                    }
                    m[r][4] += pw[r] * p.rate.ln();
                }
            }
            for col in 0..4 {
                let piv = (col..4)
                    .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                    .unwrap();
                m.swap(col, piv);
                for r in 0..4 {
                    if r != col {
                        let f = m[r][col] / m[col][col];
                        for s in col..5 {
                            m[r][s] -= f * m[col][s];
                        }
                    }
                }
            }
            std::array::from_fn(|k| m[k][4] / m[k][k])
        };
        let (ca, cb) = (fit(a), fit(b));
        let qa: Vec<f64> = a.iter().map(|p| p.quality).collect();
        let qb: Vec<f64> = b.iter().map(|p| p.quality).collect();
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = (min(&qa).max(min(&qb)), max(&qa).min(max(&qb)));
        let eval = |c: &[f64; 4], x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        let steps = 100_000;
        let dx = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let (x0, x1) = (lo + i as f64 * dx, lo + (i + 1) as f64 * dx);
            let d0 = eval(&cb, x0) - eval(&ca, x0);
            let d1 = eval(&cb, x1) - eval(&ca, x1);
            integral += 0.5 * (d0 + d1) * dx;
        }
        ((integral / (hi - lo)).exp() - 1.0) * 100.0
    }

    #[test]
    fn bd_rate_matches_trapezoid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 50 {
            let (a, b) = (random_curve(&mut rng), random_curve(&mut rng));
            let Ok(got) = bd_rate(&a, &b) else { continue };
            let want = oracle_bd_rate(&a, &b);
            assert!(
                (got - want).abs() <= 0.001 * want.abs().max(1.0),
                "{got} vs {want}"
            );
            checked += 1;
        }
    }

    #[test]
    fn bd_rate_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (a, b) = (random_curve(&mut rng), random_curve(&mut rng));
            let (Ok(ab), Ok(ba)) = (bd_rate(&a, &b), bd_rate(&b, &a)) else {
                continue;
            };
            let pred = -ba / (1.0 + ba / 100.0);
            assert!((ab - pred).abs() <= 0.005 * pred.abs().max(1.0));
        }
    }
}
