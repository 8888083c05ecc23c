//! Encoding, decoding, the rate-distortion objective and training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::diff::{ops, LrSchedule, Real, Tape, Tensor, Var};
use crate::entropy::{self, gaussian_mass_value, FactorizedEval, MASS_FLOOR};
use crate::error::{Error, Result};
use crate::io::{self, geometry_hash, Bitstream, VoxelCloud};
use crate::metrics;
use crate::net::{Codec, CodecConfig, NetMaps};
use crate::range_coder::{CdfTable, Decoder, Encoder, RADIUS};
use crate::render::{composite, Image, Rig, RigPlans};
use crate::sparse::Coord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    /// `1 − MS-SSIM`, averaged over RGB.
    MsSsim,
}

impl std::str::FromStr for Distortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mse" => Ok(Distortion::Mse),
            "ms-ssim" | "msssim" => Ok(Distortion::MsSsim),
            other => Err(Error::Invalid(format!("unknown distortion {other:?}"))),
        }
    }
}

impl std::fmt::Display for Distortion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "ms-ssim",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub distortion: Distortion,
    pub rig: Rig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.rig.views.is_empty() {
            return Err(Error::Invalid("rig has no views".into()));
        }
        Ok(())
    }
}

/// `R_y + R_z + λ·d`.
pub fn rd_loss(rate_y: f64, rate_z: f64, distortion: f64, lambda: f64) -> f64 {
    rate_y + rate_z + lambda * distortion
}

/// Mean distortion over aligned view pairs.
pub fn distortion(reference: &[Image], decoded: &[Image], kind: Distortion) -> Result<f64> {
    if reference.len() != decoded.len() || reference.is_empty() {
        return Err(Error::Invalid(format!(
            "{} reference views but {} decoded views",
            reference.len(),
            decoded.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in reference.iter().zip(decoded) {
        total += match kind {
            Distortion::Mse => metrics::mse(a, b, metrics::Channel::Rgb)?,
            Distortion::MsSsim => 1.0 - metrics::ms_ssim(a, b)?,
        };
    }
    Ok(total / reference.len() as f64)
}

/// Tape version of [`distortion`] for rendered image vars of shape `(H·W) × 3`.
pub fn distortion_var<T: Real>(
    tape: &mut Tape<T>,
    reference: &[Image],
    decoded: &[Var],
    kind: Distortion,
) -> Result<Var> {
    if reference.len() != decoded.len() || reference.is_empty() {
        return Err(Error::Invalid(format!(
            "{} reference views but {} decoded views",
            reference.len(),
            decoded.len()
        )));
    }
    let mut terms = Vec::with_capacity(decoded.len());
    for (r, &d) in reference.iter().zip(decoded) {
        terms.push(match kind {
            Distortion::Mse => {
                let target = r.to_tensor().cast();
                if tape.value(d).shape() != target.shape() {
                    return Err(Error::Shape(format!(
                        "decoded view {:?} vs reference {:?}",
                        tape.value(d).shape(),
                        target.shape()
                    )));
                }
                ops::mse(tape, d, &target)
            }
            Distortion::MsSsim => metrics::ms_ssim_loss(tape, d, r)?,
        });
    }
    let w = vec![1.0 / terms.len() as f64; terms.len()];
    Ok(ops::weighted_sum(tape, &terms, &w))
}

/// One cloud prepared for training: maps, attributes in pyramid order and
/// ground-truth renders from the loss rig.
#[derive(Clone, Debug)]
pub struct Scene {
    pub maps: NetMaps,
    pub attrs: Tensor,
    pub plans: RigPlans,
    pub targets: Vec<Image>,
}

impl Scene {
    pub fn new(cloud: &VoxelCloud, cfg: &CodecConfig, rig: &Rig) -> Result<Self> {
        let (maps, attrs) = prepare(cloud, cfg)?;
        let plans = RigPlans::build(maps.pyramid.level(0)?.coords(), rig, None)?;
        let targets = plans.render(&attrs);
        Ok(Scene {
            maps,
            attrs,
            plans,
            targets,
        })
    }

    pub fn points(&self) -> usize {
        self.maps.points()
    }
}

/// Maps for the cloud's geometry plus its colors in level-0 order.
pub fn prepare(cloud: &VoxelCloud, cfg: &CodecConfig) -> Result<(NetMaps, Tensor)> {
    if cloud.is_empty() {
        return Err(Error::Geometry("empty cloud".into()));
    }
    if cloud.colors.len() != cloud.coords.len() {
        return Err(Error::Shape(format!(
            "{} coordinates but {} colors",
            cloud.coords.len(),
            cloud.colors.len()
        )));
    }
    let maps = NetMaps::build(cloud.coords.clone(), cfg)?;
    let set = maps.pyramid.level(0)?;
    let mut attrs = Tensor::zeros(set.len(), 3);
    for (c, rgb) in cloud.coords.iter().zip(&cloud.colors) {
        let row = set
            .lookup(c)
            .ok_or_else(|| Error::Geometry(format!("coordinate {c:?} lost")))?;
        attrs.row_mut(row).copy_from_slice(rgb);
    }
    Ok((maps, attrs))
}

/// Additive quantization noise for the latent and hyperlatent.
#[derive(Clone, Debug)]
pub struct Noise {
    pub y: Tensor,
    pub z: Tensor,
}

impl Noise {
    pub fn sample<R: rand::Rng>(codec: &Codec, maps: &NetMaps, rng: &mut R) -> Self {
        let top = codec.cfg.stages;
        Noise {
            z: entropy::uniform_noise(maps.level_len(top + 1), codec.cfg.hyper, rng),
            y: entropy::uniform_noise(maps.level_len(top), codec.cfg.latent, rng),
        }
    }
}

/// Scalar terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    /// Bits of the latent.
    pub rate_y: Var,
    /// Bits of the hyperlatent.
    pub rate_z: Var,
    pub distortion: Var,
    /// `(R_y + R_z)/N + λ·d`.
    pub loss: Var,
}

/// Everything after the analysis transform: noisy quantization, rates,
/// synthesis, rendering and distortion.
pub fn rd_from_latent<T: Real>(
    tape: &mut Tape<T>,
    codec: &Codec,
    scene: &Scene,
    loss: &LossConfig,
    y: Var,
    noise: &Noise,
) -> Result<RdTerms> {
    let z = codec.hyper_encoder(tape, &scene.maps, y)?;
    let z_hat = ops::add_const(tape, z, &noise.z.cast());
    let (mu, sigma) = codec.hyper_decoder(tape, &scene.maps, z_hat)?;
    let y_hat = ops::add_const(tape, y, &noise.y.cast());
    let py = entropy::gaussian_mass(tape, y_hat, mu, sigma);
    let rate_y = entropy::bits(tape, py);
    let pz = codec.prior.mass(tape, &codec.store, z_hat)?;
    let rate_z = entropy::bits(tape, pz);
    let x_hat = codec.synthesis(tape, &scene.maps, y_hat)?;
    let views: Vec<Var> = scene
        .plans
        .plans
        .iter()
        .map(|p| composite(tape, x_hat, Arc::clone(p)))
        .collect();
    let d = distortion_var(tape, &scene.targets, &views, loss.distortion)?;
    let n = scene.points() as f64;
    let j = ops::weighted_sum(tape, &[rate_y, rate_z, d], &[1.0 / n, 1.0 / n, loss.lambda]);
    Ok(RdTerms {
        rate_y,
        rate_z,
        distortion: d,
        loss: j,
    })
}

/// Training-mode forward pass from the scene's attributes.
pub fn rd_forward<T: Real>(
    tape: &mut Tape<T>,
    codec: &Codec,
    scene: &Scene,
    loss: &LossConfig,
    noise: &Noise,
) -> Result<RdTerms> {
    let x = tape.constant(scene.attrs.cast());
    rd_from_attrs(tape, codec, scene, loss, x, noise)
}

/// [`rd_forward`] with the attributes supplied as a var.
pub fn rd_from_attrs<T: Real>(
    tape: &mut Tape<T>,
    codec: &Codec,
    scene: &Scene,
    loss: &LossConfig,
    x: Var,
    noise: &Noise,
) -> Result<RdTerms> {
    let y = codec.analysis(tape, &scene.maps, x)?;
    rd_from_latent(tape, codec, scene, loss, y, noise)
}

/// Tail mass left outside a Gaussian table is below `Φ(−TAIL_SIGMAS)`.
const TAIL_SIGMAS: f64 = 8.0;

/// Offsets `−radius..=radius` around a center plus one escape symbol that is
/// followed by the raw 32-bit value.
struct OffsetTable {
    table: CdfTable,
    center: i64,
    radius: i64,
}

impl OffsetTable {
    fn new(center: i64, radius: i64, mass: impl Fn(i64) -> f64) -> Result<Self> {
        let mut masses: Vec<f64> = (-radius..=radius)
            .map(|k| mass(center + k).max(MASS_FLOOR))
            .collect();
        let inside: f64 = masses.iter().sum();
        masses.push((1.0 - inside).max(MASS_FLOOR));
        let esc = masses.len() - 1;
        Ok(OffsetTable {
            table: CdfTable::from_masses(&masses)?.with_escape(esc),
            center,
            radius,
        })
    }

    fn encode(&self, enc: &mut Encoder, v: i32) -> Result<()> {
        let off = v as i64 - self.center;
        if off.abs() <= self.radius {
            enc.encode(&self.table, (off + self.radius) as usize)
        } else {
            enc.encode(&self.table, self.table.len() - 1)?;
            enc.encode_raw32(v as u32);
            Ok(())
        }
    }

    fn decode(&self, dec: &mut Decoder) -> Result<i32> {
        let s = dec.decode(&self.table)?;
        if s == self.table.len() - 1 {
            Ok(dec.decode_raw32()? as i32)
        } else {
            Ok((self.center + s as i64 - self.radius) as i32)
        }
    }
}

fn gaussian_table(mu: f32, sigma: f32) -> Result<OffsetTable> {
    let (mu, sigma) = (mu as f64, sigma as f64);
    if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Entropy(format!("invalid Gaussian parameters ({mu}, {sigma})")));
    }
    let center = mu.round().clamp(i32::MIN as f64, i32::MAX as f64) as i64;
    let radius = ((TAIL_SIGMAS * sigma).ceil() as i64 + 1).clamp(1, RADIUS as i64);
    OffsetTable::new(center, radius, |k| entropy::gaussian_bin(k as f64, mu, sigma))
}

fn factorized_tables(eval: &FactorizedEval) -> Result<Vec<OffsetTable>> {
    (0..eval.channels())
        .map(|c| OffsetTable::new(0, RADIUS as i64, |k| eval.bin(c, k as f64)))
        .collect()
}

fn to_symbol(v: f32) -> Result<i32> {
    if !v.is_finite() || v.abs() > i32::MAX as f32 / 2.0 {
        return Err(Error::Entropy(format!("latent value {v} cannot be coded")));
    }
    Ok(v as i32)
}

/// Encoder output together with the quantized latents and the model's rate estimate.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    /// `−Σ log₂ p(ŷ)` under the Gaussian model.
    pub estimate_y: f64,
    /// `−Σ log₂ p(ẑ)` under the factorized prior.
    pub estimate_z: f64,
}

impl Encoded {
    pub fn estimate_bytes(&self) -> f64 {
        (self.estimate_y + self.estimate_z) / 8.0
    }

    pub fn bpp(&self) -> f64 {
        8.0 * self.bitstream.len() as f64 / self.bitstream.points as f64
    }
}

fn hyper_params(codec: &Codec, maps: &NetMaps, z_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.constant(z_hat.clone());
    let (mu, sigma) = codec.hyper_decoder(&mut tape, maps, z)?;
    Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
}

/// Range-codes given quantized latents; `encode` and the idempotence check share it.
pub fn encode_latents(
    codec: &Codec,
    maps: &NetMaps,
    y_hat: &Tensor,
    z_hat: &Tensor,
    lambda_id: u8,
) -> Result<Encoded> {
    let coords = maps.pyramid.level(0)?.coords();
    let eval = codec.prior.evaluator(&codec.store);
    let ztables = factorized_tables(&eval)?;
    let hyper = codec.cfg.hyper;
    if z_hat.cols() != hyper {
        return Err(Error::Shape(format!("hyperlatent has {} channels", z_hat.cols())));
    }
    let mut enc = Encoder::new();
    let mut estimate_z = 0.0;
    for (k, &v) in z_hat.data().iter().enumerate() {
        let c = k % hyper;
        let s = to_symbol(v)?;
        ztables[c].encode(&mut enc, s)?;
        estimate_z -= eval.bin(c, s as f64).max(MASS_FLOOR).log2();
    }
    let z_bytes = enc.finish();

    let (mu, sigma) = hyper_params(codec, maps, z_hat)?;
    if mu.shape() != y_hat.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs model {:?}",
            y_hat.shape(),
            mu.shape()
        )));
    }
    let mut enc = Encoder::new();
    let mut estimate_y = 0.0;
    for ((&v, &m), &s) in y_hat.data().iter().zip(mu.data()).zip(sigma.data()) {
        let sym = to_symbol(v)?;
        gaussian_table(m, s)?.encode(&mut enc, sym)?;
        estimate_y -= gaussian_mass_value(sym as f64, m as f64, s as f64).log2();
    }
    let y_bytes = enc.finish();
    Ok(Encoded {
        bitstream: Bitstream {
            lambda_id,
            geometry_hash: geometry_hash(coords),
            points: coords.len() as u32,
            z: z_bytes,
            y: y_bytes,
        },
        y_hat: y_hat.clone(),
        z_hat: z_hat.clone(),
        estimate_y,
        estimate_z,
    })
}

/// Compresses the colors of `cloud`.
pub fn encode(cloud: &VoxelCloud, codec: &Codec, lambda_id: u8) -> Result<Encoded> {
    let (maps, attrs) = prepare(cloud, &codec.cfg)?;
    let mut tape = Tape::new();
    let x = tape.constant(attrs);
    let y = codec.analysis(&mut tape, &maps, x)?;
    let z = codec.hyper_encoder(&mut tape, &maps, y)?;
    let y_hat = tape.value(y).map(f32::round);
    let z_hat = tape.value(z).map(f32::round);
    drop(tape);
    encode_latents(codec, &maps, &y_hat, &z_hat, lambda_id)
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Colors clamped to `[0, 1]`, coordinates sorted.
    pub cloud: VoxelCloud,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
}

/// Reconstructs colors for `geometry`, which must hash to the header's value.
pub fn decode(bitstream: &Bitstream, geometry: &[Coord], codec: &Codec) -> Result<Decoded> {
    let hash = geometry_hash(geometry);
    if hash != bitstream.geometry_hash || geometry.len() != bitstream.points as usize {
        return Err(Error::Bitstream(format!(
            "geometry mismatch: header has {} points with hash {:016x}, given {} points with hash {hash:016x}",
            bitstream.points,
            bitstream.geometry_hash,
            geometry.len()
        )));
    }
    let maps = NetMaps::build(geometry.to_vec(), &codec.cfg)?;
    let top = codec.cfg.stages;

    let eval = codec.prior.evaluator(&codec.store);
    let ztables = factorized_tables(&eval)?;
    let (rows, hyper) = (maps.level_len(top + 1), codec.cfg.hyper);
    let mut dec = Decoder::new(&bitstream.z)?;
    let mut z = Vec::with_capacity(rows * hyper);
    for k in 0..rows * hyper {
        z.push(ztables[k % hyper].decode(&mut dec)? as f32);
    }
    let z_hat = Tensor::from_vec(rows, hyper, z);

    let (mu, sigma) = hyper_params(codec, &maps, &z_hat)?;
    let mut dec = Decoder::new(&bitstream.y)?;
    let mut y = Vec::with_capacity(mu.len());
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        y.push(gaussian_table(m, s)?.decode(&mut dec)? as f32);
    }
    let y_hat = Tensor::from_vec(mu.rows(), mu.cols(), y);

    let mut tape = Tape::new();
    let yv = tape.constant(y_hat.clone());
    let x = codec.synthesis(&mut tape, &maps, yv)?;
    let x = tape.value(x);
    let set = maps.pyramid.level(0)?;
    let cloud = VoxelCloud {
        coords: set.coords().to_vec(),
        colors: (0..set.len())
            .map(|r| {
                let row = x.row(r);
                [0, 1, 2].map(|c| row[c].clamp(0.0, 1.0))
            })
            .collect(),
    };
    Ok(Decoded {
        cloud,
        y_hat,
        z_hat,
    })
}

/// A block of a larger cloud in local coordinates.
#[derive(Clone, Debug)]
pub struct Patch {
    pub offset: Coord,
    pub cloud: VoxelCloud,
}

/// Splits `cloud` into axis-aligned `block³` cubes, skipping empty ones.
pub fn patch_cloud(cloud: &VoxelCloud, block: i32) -> Result<Vec<Patch>> {
    if block <= 0 {
        return Err(Error::Invalid(format!("block size {block}")));
    }
    let mut groups: FxHashMap<Coord, (Vec<Coord>, Vec<[f32; 3]>)> = FxHashMap::default();
    for (c, rgb) in cloud.coords.iter().zip(&cloud.colors) {
        let key = c.map(|v| v.div_euclid(block));
        let e = groups.entry(key).or_default();
        e.0.push([0, 1, 2].map(|k| c[k] - key[k] * block));
        e.1.push(*rgb);
    }
    let mut keys: Vec<Coord> = groups.keys().copied().collect();
    keys.sort_unstable();
    keys.into_iter()
        .map(|k| {
            let (coords, colors) = groups.remove(&k).expect("key present");
            Ok(Patch {
                offset: k.map(|v| v * block),
                cloud: VoxelCloud::from_points(coords, colors)?,
            })
        })
        .collect()
}

/// Reads a PLY and voxelizes it to the 1024³ grid unless it already lies on it.
pub fn load_cloud(path: &Path) -> Result<VoxelCloud> {
    let raw = io::read_ply(path)?;
    if raw.is_empty() {
        return Err(Error::Ply(format!("{} has no points", path.display())));
    }
    if io::is_voxelized(&raw, 1024) {
        VoxelCloud::from_raw_integer(&raw)
    } else {
        io::voxelize(&raw, 1024)
    }
}

/// Learning-rate schedule by name: `paper`, `constant:<lr>` or
/// `step:<base>:<factor>:<interval>:<floor>`.
pub fn parse_lr_schedule(id: &str) -> Result<LrSchedule> {
    let bad = || Error::Invalid(format!("unknown lr schedule {id:?}"));
    let parts: Vec<&str> = id.trim().split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    match parts.as_slice() {
        ["paper"] => Ok(LrSchedule::default()),
        ["constant", lr] => {
            let lr = num(lr)?;
            Ok(LrSchedule {
                base: lr,
                factor: 1.0,
                interval: 1,
                floor: lr,
            })
        }
        ["step", b, f, i, fl] => Ok(LrSchedule {
            base: num(b)?,
            factor: num(f)?,
            interval: i.parse().map_err(|_| bad())?,
            floor: num(fl)?,
        }),
        _ => Err(bad()),
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: String,
    pub lambda: f64,
    pub distortion: Distortion,
    /// `train`, `test` or `elev:az,az,...`.
    pub rig: String,
    pub image_size: usize,
    pub block: i32,
    pub data: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u32,
    pub codec: CodecConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            seed: 0,
            epochs: 50,
            batch_size: 1,
            lr: "paper".into(),
            lambda: 800.0,
            distortion: Distortion::Mse,
            rig: "train".into(),
            image_size: 128,
            block: 128,
            data: Vec::new(),
            checkpoint: None,
            checkpoint_every: 1,
            codec: CodecConfig::default(),
        }
    }
}

/// Rig by name at a square image size.
pub fn parse_rig(spec: &str, size: usize) -> Result<Rig> {
    match spec.trim() {
        "train" => Ok(Rig::training(size)),
        "test" => Ok(Rig::test(size)),
        other => Rig::parse(other, size),
    }
}

impl RunManifest {
    pub fn rig(&self) -> Result<Rig> {
        parse_rig(&self.rig, self.image_size)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            lambda: self.lambda,
            distortion: self.distortion,
            rig: self.rig()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key=value` lines; codec settings carry a `codec.` prefix and every
    /// dataset path gets its own `data=` line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "epochs={}", self.epochs).unwrap();
        writeln!(s, "batch_size={}", self.batch_size).unwrap();
        writeln!(s, "lr={}", self.lr).unwrap();
        writeln!(s, "lambda={}", self.lambda).unwrap();
        writeln!(s, "distortion={}", self.distortion).unwrap();
        writeln!(s, "rig={}", self.rig).unwrap();
        writeln!(s, "image_size={}", self.image_size).unwrap();
        writeln!(s, "block={}", self.block).unwrap();
        for p in &self.data {
            writeln!(s, "data={}", p.display()).unwrap();
        }
        if let Some(p) = &self.checkpoint {
            writeln!(s, "checkpoint={}", p.display()).unwrap();
        }
        writeln!(s, "checkpoint_every={}", self.checkpoint_every).unwrap();
        for line in self.codec.to_text().lines() {
            writeln!(s, "codec.{line}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = RunManifest {
            data: Vec::new(),
            ..Default::default()
        };
        let mut codec = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("manifest line {}: expected key=value", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Invalid(format!("manifest line {}: bad value for {k}: {v:?}", n + 1));
            match k {
                "seed" => m.seed = v.parse().map_err(|_| bad())?,
                "epochs" => m.epochs = v.parse().map_err(|_| bad())?,
                "batch_size" => m.batch_size = v.parse().map_err(|_| bad())?,
                "lr" => m.lr = v.to_string(),
                "lambda" => m.lambda = v.parse().map_err(|_| bad())?,
                "distortion" => m.distortion = v.parse()?,
                "rig" => m.rig = v.to_string(),
                "image_size" => m.image_size = v.parse().map_err(|_| bad())?,
                "block" => m.block = v.parse().map_err(|_| bad())?,
                "data" => m.data.push(PathBuf::from(v)),
                "checkpoint" => m.checkpoint = Some(PathBuf::from(v)),
                "checkpoint_every" => m.checkpoint_every = v.parse().map_err(|_| bad())?,
                _ if k.starts_with("codec.") => {
                    writeln!(codec, "{}={v}", &k["codec.".len()..]).unwrap();
                }
                other => {
                    return Err(Error::Invalid(format!(
                        "manifest line {}: unknown key {other}",
                        n + 1
                    )))
                }
            }
        }
        m.codec = CodecConfig::from_text(&codec)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.block <= 0 {
            return Err(Error::Invalid("block size must be positive".into()));
        }
        parse_lr_schedule(&self.lr)?;
        self.loss_config()?;
        self.codec.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub epoch: u32,
    pub lr: f64,
    /// Mean objective over the batch.
    pub loss: f64,
    pub bpp_y: f64,
    pub bpp_z: f64,
    pub distortion: f64,
}

/// Patches of every cloud, prepared for the manifest's rig. Patches whose
/// pyramid is too shallow for the codec are skipped.
pub fn prepare_scenes(clouds: &[VoxelCloud], manifest: &RunManifest) -> Result<Vec<Scene>> {
    let rig = manifest.rig()?;
    let mut scenes = Vec::new();
    for cloud in clouds {
        for patch in patch_cloud(cloud, manifest.block)? {
            match Scene::new(&patch.cloud, &manifest.codec, &rig) {
                Ok(s) => scenes.push(s),
                Err(Error::Geometry(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if scenes.is_empty() {
        return Err(Error::Invalid("no usable training patches".into()));
    }
    Ok(scenes)
}

/// Adam on the rate-distortion objective with noise quantization. One epoch
/// visits every scene once in a seeded shuffle. Gradients are clipped to norm 10.
pub fn train(
    codec: &mut Codec,
    scenes: &[Scene],
    manifest: &RunManifest,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Vec<StepStats>> {
    manifest.validate()?;
    let loss_cfg = manifest.loss_config()?;
    let schedule = parse_lr_schedule(&manifest.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..manifest.epochs {
        let lr = schedule.at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(manifest.batch_size) {
            let step = history.len();
            codec.store.zero_grads();
            let mut stats = StepStats {
                step,
                epoch,
                lr,
                loss: 0.0,
                bpp_y: 0.0,
                bpp_z: 0.0,
                distortion: 0.0,
            };
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let scene = &scenes[i];
                let noise = Noise::sample(codec, &scene.maps, &mut rng);
                let mut tape = Tape::new();
                let t = rd_forward(&mut tape, codec, scene, &loss_cfg, &noise)?;
                let j = tape.scalar(t.loss);
                if !j.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                let n = scene.points() as f64;
                stats.loss += w * j;
                stats.bpp_y += w * tape.scalar(t.rate_y) / n;
                stats.bpp_z += w * tape.scalar(t.rate_z) / n;
                stats.distortion += w * tape.scalar(t.distortion);
                let scaled = ops::weighted_sum(&mut tape, &[t.loss], &[w]);
                tape.backward(scaled)?;
                tape.accumulate_into(&mut codec.store);
            }
            codec.store.clip_grad_norm(10.0);
            codec.store.adam_step(lr)?;
            on_step(&stats);
            history.push(stats);
        }
        if let Some(path) = &manifest.checkpoint {
            let every = manifest.checkpoint_every.max(1);
            if (epoch + 1) % every == 0 || epoch + 1 == manifest.epochs {
                codec.save_file(path)?;
            }
        }
    }
    Ok(history)
}

/// Rendered-view quality of a reconstruction, averaged over views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewQuality {
    pub psnr_y: f64,
    pub psnr_yuv611: f64,
    pub ms_ssim: f64,
}

/// Renders `reference` and `recon` (same geometry) from every view of `rig`.
/// MS-SSIM is reported as NaN when the images are too small for it.
pub fn view_quality(reference: &VoxelCloud, recon: &VoxelCloud, rig: &Rig) -> Result<ViewQuality> {
    let (maps_ref, a) = colors_in_order(reference)?;
    let (coords_rec, b) = colors_in_order(recon)?;
    if maps_ref != coords_rec {
        return Err(Error::Geometry(
            "reference and reconstruction have different geometry".into(),
        ));
    }
    let plans = RigPlans::build(&maps_ref, rig, None)?;
    let ra: Vec<Image> = plans.render(&a).iter().map(Image::clamped).collect();
    let rb: Vec<Image> = plans.render(&b).iter().map(Image::clamped).collect();
    let mut q = ViewQuality {
        psnr_y: 0.0,
        psnr_yuv611: 0.0,
        ms_ssim: 0.0,
    };
    let v = ra.len() as f64;
    for (x, y) in ra.iter().zip(&rb) {
        q.psnr_y += metrics::psnr(x, y, metrics::Channel::Y)? / v;
        q.psnr_yuv611 += metrics::yuv_psnr_611(x, y)? / v;
        q.ms_ssim += metrics::ms_ssim(x, y).unwrap_or(f64::NAN) / v;
    }
    Ok(q)
}

fn colors_in_order(cloud: &VoxelCloud) -> Result<(Vec<Coord>, Tensor)> {
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_unstable_by_key(|&i| cloud.coords[i]);
    let coords: Vec<Coord> = order.iter().map(|&i| cloud.coords[i]).collect();
    if coords.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Geometry("duplicate coordinates".into()));
    }
    let data = order.iter().flat_map(|&i| cloud.colors[i]).collect();
    Ok((coords, Tensor::from_vec(cloud.len(), 3, data)))
}

/// Column names of the evaluation CSV.
pub const EVAL_CSV_HEADER: &str = "cloud,lambda,bpp,psnr_y,psnr_yuv611,ms_ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub cloud: String,
    pub lambda: f64,
    pub bpp: f64,
    pub quality: ViewQuality,
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        let f = |v: f64| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v:.6}")
            }
        };
        format!(
            "{},{},{},{},{},{}",
            self.cloud.replace(',', "_"),
            f(self.lambda),
            f(self.bpp),
            f(self.quality.psnr_y),
            f(self.quality.psnr_yuv611),
            f(self.quality.ms_ssim)
        )
    }
}
