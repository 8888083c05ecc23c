//! Central finite-difference gradient checker.
//!
//! The error for one input tensor is the norm-wise relative error
//! `‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂)` over the sampled
//! coordinates, with step `h = rel_step · max(1, |x|)`. Analytic gradients
//! come from a 32-bit tape; the finite differences replay the same objective
//! in 64-bit so that rounding noise stays far below the tolerance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates probed per input; inputs with fewer entries are probed fully.
    pub samples_per_input: usize,
    pub rel_step: f64,
    /// Per-input switch; `None` checks all inputs.
    pub check: Option<Vec<bool>>,
    /// Skip coordinates whose central differences at `h` and `h/2` disagree,
    /// i.e. where a ReLU switches inside the probe interval. Skipped
    /// coordinates are replaced by fresh ones.
    pub kink_guard: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples_per_input: 24,
            rel_step: 1e-3,
            check: None,
            kink_guard: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
    /// Coordinates rejected by the kink guard.
    pub skipped: usize,
}

/// A scalar function of tensors, evaluable at either precision.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

fn eval64<F: Objective>(inputs: &[Tensor<f64>], f: &F) -> Result<f64> {
    let mut tape = Tape::<f64>::default();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

const KINK_TOL: f64 = 1e-5;

fn central<F: Objective>(
    work: &mut [Tensor<f64>],
    f: &F,
    i: usize,
    k: usize,
    x: f64,
    h: f64,
) -> Result<(f64, f64)> {
    work[i].data_mut()[k] = x + h;
    let fp = eval64(work, f)?;
    work[i].data_mut()[k] = x - h;
    let fm = eval64(work, f)?;
    work[i].data_mut()[k] = x;
    Ok(((fp - fm) / (2.0 * h), 0.5 * (fp.abs() + fm.abs())))
}

/// Compares the tape gradient of the scalar `f(inputs)` against central differences.
pub fn check_gradients<F: Objective>(
    inputs: &[Tensor],
    f: &F,
    opts: &GradCheckOptions,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    for (i, input) in inputs.iter().enumerate() {
        let enabled = opts.check.as_ref().is_none_or(|c| c[i]);
        if !enabled || input.is_empty() {
            report.per_input.push(0.0);
            continue;
        }
        let n = input.len();
        let wanted = opts.samples_per_input.min(n);
        let pool = if opts.kink_guard { 4 * wanted } else { wanted }.min(n);
        let picks: Vec<usize> = if pool == n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, pool).into_vec()
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        let mut accepted = 0;
        for &k in &picks {
            if accepted == wanted {
                break;
            }
            let x = input.data()[k] as f64;
            let h = opts.rel_step * x.abs().max(1.0);
            let (numeric, level) = central(&mut work, f, i, k, x, h)?;
            if opts.kink_guard {
                let (half, _) = central(&mut work, f, i, k, x, h / 2.0)?;
                // rounding noise of the two differences, plus a relative band
                let noise = 1e3 * f64::EPSILON * level.max(1.0) / h;
                if (numeric - half).abs() > KINK_TOL * numeric.abs().max(half.abs()) + noise {
                    report.skipped += 1;
                    continue;
                }
            }
            accepted += 1;
            let a = analytic[i].data()[k] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.max(n2).sqrt();
        let err = if denom < 1e-12 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        report.coords_checked += accepted;
        report.max_rel_err = report.max_rel_err.max(err);
        report.per_input.push(err);
    }
    Ok(report)
}
