//! Finite-difference gradient suites over the differentiable operations,
//! shared by the test suite and the command-line `gradcheck`.
//!
//! Networks with ReLUs are probed with a small step and the kink guard, since
//! zero-initialized biases put pre-activations exactly on the kink. Every
//! suite also requires the full coordinate quota to have been checked.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SpTransBlock;
use crate::diff::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, Objective};
use crate::diff::{ops, ParamStore, Real, Tape, Tensor, Var};
use crate::entropy::{bits, factorized_mass, gaussian_mass, FactorizedModel, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::io::VoxelCloud;
use crate::net::{Codec, CodecConfig};
use crate::pipeline::{rd_from_attrs, Distortion, LossConfig, Noise, Scene};
use crate::render::{composite, rasterize, Camera, CompositePlan, RasterSettings, Rig, View};
use crate::sparse::{conv, Coord, CoordSet, KernelMap, NeighborTable};

/// Relative error bound for every suite.
pub const TOLERANCE: f64 = 1e-3;

pub const SUITES: [&str; 6] = [
    "sparse_conv",
    "sp_trans_block",
    "gaussian_mass",
    "factorized_mass",
    "composite_backward",
    "rd_loss",
];

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    /// Seeds where the kink guard left fewer coordinates than requested.
    pub incomplete_seeds: usize,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE && self.incomplete_seeds == 0
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, extent: i32) -> Vec<Coord> {
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert([0, 1, 2].map(|_| rng.gen_range(0..extent)));
    }
    set.into_iter().collect()
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f32) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn kinked(samples: usize) -> GradCheckOptions {
    GradCheckOptions {
        samples_per_input: samples,
        rel_step: 1e-5,
        kink_guard: true,
        ..GradCheckOptions::default()
    }
}

/// Number of coordinates a full pass over `inputs` probes.
fn quota(inputs: &[Tensor], opts: &GradCheckOptions) -> usize {
    inputs
        .iter()
        .map(|t| t.len().min(opts.samples_per_input))
        .sum()
}

struct ConvChain {
    down: Arc<KernelMap>,
    up: Arc<KernelMap>,
    same: Arc<KernelMap>,
    probe: Tensor,
}

impl Objective for ConvChain {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let h = conv(tape, v[0], v[1], v[2], self.down.clone());
        let h = conv(tape, h, v[3], v[4], self.up.clone());
        let h = conv(tape, h, v[5], v[6], self.same.clone());
        Ok(ops::dot_const(tape, h, &self.probe.cast()))
    }
}

fn sparse_conv_case(seed: u64) -> Result<(GradCheckReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 40 + (seed as usize * 13) % 160;
    let fine = CoordSet::new(random_coords(&mut rng, n, 8), 1)?;
    let coarse = fine.coarsen();
    let f = ConvChain {
        down: Arc::new(KernelMap::down(&fine, &coarse, 3)?),
        up: Arc::new(KernelMap::up(&coarse, &fine, 3)?),
        same: Arc::new(KernelMap::same(&fine, 3)),
        probe: rand_tensor(&mut rng, n, 2, -1.0, 1.0),
    };
    let inputs = vec![
        rand_tensor(&mut rng, n, 3, -1.0, 1.0),
        rand_tensor(&mut rng, 27 * 3, 4, -0.5, 0.5),
        rand_tensor(&mut rng, 1, 4, -0.5, 0.5),
        rand_tensor(&mut rng, 27 * 4, 3, -0.5, 0.5),
        rand_tensor(&mut rng, 1, 3, -0.5, 0.5),
        rand_tensor(&mut rng, 27 * 3, 2, -0.5, 0.5),
        rand_tensor(&mut rng, 1, 2, -0.5, 0.5),
    ];
    let opts = GradCheckOptions::default();
    Ok((check_gradients(&inputs, &f, &opts, seed)?, quota(&inputs, &opts)))
}

struct TransProbe {
    block: SpTransBlock,
    store: ParamStore,
    table: Arc<NeighborTable>,
    probe: Tensor,
    bound: Vec<crate::diff::ParamId>,
}

impl Objective for TransProbe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        for (&id, &var) in self.bound.iter().zip(&v[1..]) {
            tape.bind_param(id, var);
        }
        let out = self.block.apply(tape, &self.store, v[0], &self.table);
        Ok(ops::dot_const(tape, out, &self.probe.cast()))
    }
}

fn sp_trans_case(seed: u64) -> Result<(GradCheckReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 30 + (seed as usize * 11) % 170;
    let c = 4;
    let set = CoordSet::new(random_coords(&mut rng, n, 9), 1)?;
    let table = Arc::new(NeighborTable::build(&set, 5)?);
    let mut store = ParamStore::new();
    let block = SpTransBlock::new(&mut store, "trans", c, 5, &mut rng)?;
    jitter(&mut store, &mut rng, 0.1);
    let a = &block.attention;
    let bound = vec![
        a.query.hidden.weight,
        a.key.output.weight,
        a.value.hidden.bias,
        a.position.hidden.weight,
    ];
    let mut inputs = vec![rand_tensor(&mut rng, n, c, -1.0, 1.0)];
    inputs.extend(bound.iter().map(|&id| store.value(id).clone()));
    let f = TransProbe {
        block,
        store,
        table,
        probe: rand_tensor(&mut rng, n, c, -1.0, 1.0),
        bound,
    };
    let opts = kinked(24);
    Ok((check_gradients(&inputs, &f, &opts, seed)?, quota(&inputs, &opts)))
}

struct GaussProbe(Tensor);

impl Objective for GaussProbe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let s = ops::softplus_floor(tape, v[2], SIGMA_FLOOR);
        let p = gaussian_mass(tape, v[0], v[1], s);
        let b = bits(tape, p);
        let l = ops::dot_const(tape, p, &self.0.cast());
        Ok(ops::weighted_sum(tape, &[b, l], &[1.0, 1.0]))
    }
}

fn gaussian_case(seed: u64) -> Result<(GradCheckReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let inputs = vec![
        rand_tensor(&mut rng, n, 3, -3.0, 3.0),
        rand_tensor(&mut rng, n, 3, -3.0, 3.0),
        rand_tensor(&mut rng, n, 3, -0.5, 2.0),
    ];
    let f = GaussProbe(rand_tensor(&mut rng, n, 3, -1.0, 1.0));
    let opts = GradCheckOptions::default();
    Ok((check_gradients(&inputs, &f, &opts, seed)?, quota(&inputs, &opts)))
}

struct PriorProbe(Tensor);

impl Objective for PriorProbe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let p = factorized_mass(tape, v[0], &std::array::from_fn(|k| v[k + 1]))?;
        let b = bits(tape, p);
        let l = ops::dot_const(tape, p, &self.0.cast());
        Ok(ops::weighted_sum(tape, &[b, l], &[1.0, 1.0]))
    }
}

fn factorized_case(seed: u64) -> Result<(GradCheckReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = FactorizedModel::new(&mut store, "prior", 3, 4.0, &mut rng)?;
    jitter(&mut store, &mut rng, 0.3);
    let mut inputs = vec![rand_tensor(&mut rng, 8, 3, -4.0, 4.0)];
    inputs.extend(m.params.iter().map(|&id| store.value(id).clone()));
    let f = PriorProbe(rand_tensor(&mut rng, 8, 3, -1.0, 1.0));
    let opts = GradCheckOptions::default();
    Ok((check_gradients(&inputs, &f, &opts, seed)?, quota(&inputs, &opts)))
}

struct CompositeProbe {
    plan: Arc<CompositePlan>,
    probe: Tensor,
}

impl Objective for CompositeProbe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let img = composite(tape, v[0], self.plan.clone());
        Ok(ops::dot_const(tape, img, &self.probe.cast()))
    }
}

fn composite_case(seed: u64) -> Result<(GradCheckReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 20 + (seed as usize * 17) % 180;
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let view = View {
        elevation: rng.gen_range(-40.0..40.0),
        azimuth: rng.gen_range(0.0..360.0),
    };
    let cam = Camera::orbit(view, 3.0, 60.0, 24, 24)?;
    let mut s = RasterSettings::for_size(24, 24);
    s.radius *= 3.0;
    let frags = rasterize(&pts, &cam, &s)?;
    let f = CompositeProbe {
        plan: Arc::new(CompositePlan::new(&frags, n, &s)),
        probe: rand_tensor(&mut rng, 24 * 24, 3, -1.0, 1.0),
    };
    let inputs = vec![rand_tensor(&mut rng, n, 3, 0.0, 1.0)];
    let opts = GradCheckOptions {
        samples_per_input: 60,
        ..GradCheckOptions::default()
    };
    Ok((check_gradients(&inputs, &f, &opts, seed)?, quota(&inputs, &opts)))
}

struct RdProbe {
    codec: Codec,
    scene: Scene,
    loss: LossConfig,
    noise: Noise,
}

impl Objective for RdProbe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        tape.bind_param(self.codec.analysis_out_weight(), v[1]);
        let t = rd_from_attrs(tape, &self.codec, &self.scene, &self.loss, v[0], &self.noise)?;
        Ok(t.loss)
    }
}

/// Small codec used by the full-objective suite.
pub fn small_codec_config(seed: u64) -> CodecConfig {
    CodecConfig {
        hidden: 6,
        latent: 8,
        hyper: 4,
        transformers: 1,
        seed,
        ..CodecConfig::default()
    }
}

fn rd_case(seed: u64) -> Result<(GradCheckReport, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 60 + (seed as usize * 7) % 140;
    let coords = random_coords(&mut rng, n, 12);
    let colors = (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0f32..1.0)))
        .collect();
    let cloud = VoxelCloud::from_points(coords, colors)?;
    let cfg = small_codec_config(seed);
    let rig = Rig::ring(rng.gen_range(-30.0..30.0), &[0.0, 120.0], 20);
    let scene = Scene::new(&cloud, &cfg, &rig)?;
    let codec = Codec::new(cfg)?;
    let noise = Noise::sample(&codec, &scene.maps, &mut rng);
    let inputs = vec![
        scene.attrs.clone(),
        codec.store.value(codec.analysis_out_weight()).clone(),
    ];
    let f = RdProbe {
        codec,
        scene,
        loss: LossConfig {
            lambda: 800.0,
            distortion: Distortion::Mse,
            rig,
        },
        noise,
    };
    let opts = kinked(24);
    Ok((check_gradients(&inputs, &f, &opts, seed)?, quota(&inputs, &opts)))
}

/// Runs one suite over seeds `0..seeds`.
pub fn run_suite(name: &str, seeds: usize) -> Result<SuiteResult> {
    let (name, case): (&'static str, fn(u64) -> Result<(GradCheckReport, usize)>) = match name {
        "sparse_conv" => ("sparse_conv", sparse_conv_case),
        "sp_trans_block" => ("sp_trans_block", sp_trans_case),
        "gaussian_mass" => ("gaussian_mass", gaussian_case),
        "factorized_mass" => ("factorized_mass", factorized_case),
        "composite_backward" => ("composite_backward", composite_case),
        "rd_loss" => ("rd_loss", rd_case),
        other => return Err(Error::Invalid(format!("unknown gradient suite {other:?}"))),
    };
    let start = Instant::now();
    let mut result = SuiteResult {
        name,
        seeds,
        max_rel_err: 0.0,
        incomplete_seeds: 0,
        elapsed: Duration::ZERO,
    };
    for seed in 0..seeds as u64 {
        let (report, quota) = case(seed)?;
        result.max_rel_err = result.max_rel_err.max(report.max_rel_err);
        if report.coords_checked < quota {
            result.incomplete_seeds += 1;
        }
    }
    result.elapsed = start.elapsed();
    Ok(result)
}

/// Every suite, in [`SUITES`] order.
pub fn run_all(seeds: usize) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s, seeds)).collect()
}
