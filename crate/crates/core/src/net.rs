//! Analysis/synthesis transforms and the hyperprior networks.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::SpTransBlock;
use crate::diff::checkpoint::{read_checkpoint, write_checkpoint};
use crate::diff::{ops, ParamStore, Real, Tape, Var};
use crate::entropy::{FactorizedModel, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::sparse::{Coord, GeometryPyramid, KernelMap, NeighborTable};

/// Channel plan and depth of the codec.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub attr_channels: usize,
    pub hidden: usize,
    pub latent: usize,
    pub hyper: usize,
    /// Stride-2 stages in the analysis transform.
    pub stages: usize,
    /// SP-Trans blocks at each end.
    pub transformers: usize,
    pub window: usize,
    pub kernel: usize,
    /// Initial spread of the factorized prior.
    pub prior_init_scale: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            attr_channels: 3,
            hidden: 64,
            latent: 128,
            hyper: 64,
            stages: 2,
            transformers: 2,
            window: 5,
            kernel: 3,
            prior_init_scale: 4.0,
            seed: 0,
        }
    }
}

impl CodecConfig {
    /// Pyramid levels needed: the latent sits at `stages`, the hyperlatent one below.
    pub fn levels(&self) -> usize {
        self.stages + 2
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("attr_channels", self.attr_channels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("latent", self.latent.to_string()),
            ("hyper", self.hyper.to_string()),
            ("stages", self.stages.to_string()),
            ("transformers", self.transformers.to_string()),
            ("window", self.window.to_string()),
            ("kernel", self.kernel.to_string()),
            ("prior_init_scale", self.prior_init_scale.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = CodecConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Checkpoint(format!("config line {}: expected key=value", n + 1))
            })?;
            let bad = |e: &dyn std::fmt::Display| {
                Error::Checkpoint(format!("config line {}: {k}: {e}", n + 1))
            };
            let int = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(&e));
            match k.trim() {
                "attr_channels" => cfg.attr_channels = int(v)?,
                "hidden" => cfg.hidden = int(v)?,
                "latent" => cfg.latent = int(v)?,
                "hyper" => cfg.hyper = int(v)?,
                "stages" => cfg.stages = int(v)?,
                "transformers" => cfg.transformers = int(v)?,
                "window" => cfg.window = int(v)?,
                "kernel" => cfg.kernel = int(v)?,
                "prior_init_scale" => {
                    cfg.prior_init_scale = v.trim().parse().map_err(|e| bad(&e))?
                }
                "seed" => cfg.seed = v.trim().parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "config line {}: unknown key {other}",
                        n + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.window % 2 == 0 {
            return Err(Error::Invalid("kernel and window sizes must be odd".into()));
        }
        if self.stages == 0 {
            return Err(Error::Invalid("at least one stage is required".into()));
        }
        if [self.attr_channels, self.hidden, self.latent, self.hyper].contains(&0) {
            return Err(Error::Invalid("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel maps and neighbor tables for one geometry, shared by every pass.
#[derive(Clone, Debug)]
pub struct NetMaps {
    pub pyramid: GeometryPyramid,
    pub same: Vec<Arc<KernelMap>>,
    /// `down[l]` maps level `l` onto `l + 1`.
    pub down: Vec<Arc<KernelMap>>,
    /// `up[l]` maps level `l + 1` onto `l`.
    pub up: Vec<Arc<KernelMap>>,
    /// Window neighbors at the latent level.
    pub neighbors: Arc<NeighborTable>,
    pub latent_level: usize,
}

impl NetMaps {
    pub fn build(coords: Vec<Coord>, cfg: &CodecConfig) -> Result<Self> {
        let pyramid = GeometryPyramid::build(coords, cfg.levels() - 1)?;
        Self::from_pyramid(pyramid, cfg)
    }

    pub fn from_pyramid(pyramid: GeometryPyramid, cfg: &CodecConfig) -> Result<Self> {
        let levels = pyramid.depth();
        if levels < cfg.levels() {
            return Err(Error::Geometry(format!(
                "pyramid has {levels} levels, the codec needs {}",
                cfg.levels()
            )));
        }
        let mut same = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        for l in 0..cfg.levels() {
            let set = pyramid.level(l)?;
            same.push(Arc::new(KernelMap::same(set, cfg.kernel)));
            if l + 1 < cfg.levels() {
                let coarse = pyramid.level(l + 1)?;
                down.push(Arc::new(KernelMap::down(set, coarse, cfg.kernel)?));
                up.push(Arc::new(KernelMap::up(coarse, set, cfg.kernel)?));
            }
        }
        let neighbors = Arc::new(NeighborTable::build(
            pyramid.level(cfg.stages)?,
            cfg.window,
        )?);
        Ok(NetMaps {
            pyramid,
            same,
            down,
            up,
            neighbors,
            latent_level: cfg.stages,
        })
    }

    pub fn points(&self) -> usize {
        self.same[0].n_out
    }

    pub fn level_len(&self, l: usize) -> usize {
        self.same[l].n_out
    }

    fn check(&self, cfg: &CodecConfig) -> Result<()> {
        if self.same.len() < cfg.levels() || self.latent_level != cfg.stages {
            return Err(Error::Geometry(format!(
                "maps cover {} levels with the latent at {}, the codec needs {} with the latent at {}",
                self.same.len(),
                self.latent_level,
                cfg.levels(),
                cfg.stages
            )));
        }
        Ok(())
    }
}

/// `x + conv2(relu(conv1(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ResBlock {
            conv1: ConvParams::new(
                store,
                &format!("{name}.conv1"),
                kernel,
                channels,
                channels,
                1.0,
                rng,
            )?,
            conv2: ConvParams::new(
                store,
                &format!("{name}.conv2"),
                kernel,
                channels,
                channels,
                1.0,
                rng,
            )?,
        })
    }

    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        x: Var,
        map: &Arc<KernelMap>,
    ) -> Var {
        let h = self.conv1.apply(tape, store, x, map);
        let h = ops::relu(tape, h);
        let h = self.conv2.apply(tape, store, h, map);
        ops::add(tape, x, h)
    }
}

/// Learned weights of the whole codec.
#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    a_in: ConvParams,
    a_widen: ConvParams,
    a_res: Vec<ResBlock>,
    a_down: Vec<ConvParams>,
    a_trans: Vec<SpTransBlock>,
    a_out: ConvParams,
    s_in: ConvParams,
    s_trans: Vec<SpTransBlock>,
    s_up: Vec<ConvParams>,
    s_res: Vec<ResBlock>,
    s_narrow: ConvParams,
    s_out: ConvParams,
    h_enc: ConvParams,
    h_down: ConvParams,
    h_up: ConvParams,
    h_out: ConvParams,
    pub prior: FactorizedModel,
}

impl Codec {
    /// Freshly initialized codec; weights are drawn from `cfg.seed`.
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let s = &mut ParamStore::new();
        let (k, a, h, c, zc) = (
            cfg.kernel,
            cfg.attr_channels,
            cfg.hidden,
            cfg.latent,
            cfg.hyper,
        );
        let conv = |s: &mut ParamStore, n: &str, ci, co, gain, rng: &mut ChaCha8Rng| {
            ConvParams::new(s, n, k, ci, co, gain, rng)
        };
        let a_in = conv(s, "analysis.in", a, h, 1.0, rng)?;
        let a_widen = conv(s, "analysis.widen", h, c, 1.0, rng)?;
        let mut a_res = Vec::new();
        let mut a_down = Vec::new();
        for i in 0..cfg.stages {
            a_res.push(ResBlock::new(s, &format!("analysis.res{i}"), k, c, rng)?);
            a_down.push(conv(s, &format!("analysis.down{i}"), c, c, 1.0, rng)?);
        }
        let a_trans = (0..cfg.transformers)
            .map(|i| SpTransBlock::new(s, &format!("analysis.trans{i}"), c, cfg.window, rng))
            .collect::<Result<Vec<_>>>()?;
        let a_out = conv(s, "analysis.out", c, c, 0.1, rng)?;
        let s_in = conv(s, "synthesis.in", c, c, 1.0, rng)?;
        let s_trans = (0..cfg.transformers)
            .map(|i| SpTransBlock::new(s, &format!("synthesis.trans{i}"), c, cfg.window, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut s_up = Vec::new();
        let mut s_res = Vec::new();
        for i in 0..cfg.stages {
            s_up.push(conv(s, &format!("synthesis.up{i}"), c, c, 1.0, rng)?);
            s_res.push(ResBlock::new(s, &format!("synthesis.res{i}"), k, c, rng)?);
        }
        let s_narrow = conv(s, "synthesis.narrow", c, h, 1.0, rng)?;
        let s_out = conv(s, "synthesis.out", h, a, 1.0, rng)?;
        let h_enc = conv(s, "hyper.enc", c, c, 1.0, rng)?;
        let h_down = conv(s, "hyper.down", c, zc, 1.0, rng)?;
        let h_up = conv(s, "hyper.up", zc, c, 1.0, rng)?;
        let h_out = conv(s, "hyper.out", c, 2 * c, 1.0, rng)?;
        let prior = FactorizedModel::new(s, "prior", zc, cfg.prior_init_scale, rng)?;
        Ok(Codec {
            store: std::mem::take(s),
            cfg,
            a_in,
            a_widen,
            a_res,
            a_down,
            a_trans,
            a_out,
            s_in,
            s_trans,
            s_up,
            s_res,
            s_narrow,
            s_out,
            h_enc,
            h_down,
            h_up,
            h_out,
            prior,
        })
    }

    /// Attributes at level 0 (`N × attr_channels`) to the latent at level `stages`.
    pub fn analysis<T: Real>(&self, tape: &mut Tape<T>, maps: &NetMaps, x: Var) -> Result<Var> {
        maps.check(&self.cfg)?;
        self.check_rows(
            tape,
            x,
            maps.level_len(0),
            self.cfg.attr_channels,
            "analysis",
        )?;
        let st = &self.store;
        let mut h = self.a_in.apply(tape, st, x, &maps.same[0]);
        h = ops::relu(tape, h);
        h = self.a_widen.apply(tape, st, h, &maps.same[0]);
        h = ops::relu(tape, h);
        for l in 0..self.cfg.stages {
            h = self.a_res[l].apply(tape, st, h, &maps.same[l]);
            h = self.a_down[l].apply(tape, st, h, &maps.down[l]);
            h = ops::relu(tape, h);
        }
        for b in &self.a_trans {
            h = b.apply(tape, st, h, &maps.neighbors);
        }
        Ok(self.a_out.apply(tape, st, h, &maps.same[self.cfg.stages]))
    }

    /// Quantized latent back to unclamped attributes at level 0.
    pub fn synthesis<T: Real>(&self, tape: &mut Tape<T>, maps: &NetMaps, y: Var) -> Result<Var> {
        maps.check(&self.cfg)?;
        let top = self.cfg.stages;
        self.check_rows(tape, y, maps.level_len(top), self.cfg.latent, "synthesis")?;
        let st = &self.store;
        let mut h = self.s_in.apply(tape, st, y, &maps.same[top]);
        for b in &self.s_trans {
            h = b.apply(tape, st, h, &maps.neighbors);
        }
        for (i, l) in (0..top).rev().enumerate() {
            h = self.s_up[i].apply(tape, st, h, &maps.up[l]);
            h = ops::relu(tape, h);
            h = self.s_res[i].apply(tape, st, h, &maps.same[l]);
        }
        h = self.s_narrow.apply(tape, st, h, &maps.same[0]);
        h = ops::relu(tape, h);
        Ok(self.s_out.apply(tape, st, h, &maps.same[0]))
    }

    pub fn hyper_encoder<T: Real>(
        &self,
        tape: &mut Tape<T>,
        maps: &NetMaps,
        y: Var,
    ) -> Result<Var> {
        maps.check(&self.cfg)?;
        let top = self.cfg.stages;
        self.check_rows(
            tape,
            y,
            maps.level_len(top),
            self.cfg.latent,
            "hyper encoder",
        )?;
        let h = self.h_enc.apply(tape, &self.store, y, &maps.same[top]);
        let h = ops::relu(tape, h);
        Ok(self.h_down.apply(tape, &self.store, h, &maps.down[top]))
    }

    /// `(μ, σ)` at the latent level from the quantized hyperlatent.
    pub fn hyper_decoder<T: Real>(
        &self,
        tape: &mut Tape<T>,
        maps: &NetMaps,
        z: Var,
    ) -> Result<(Var, Var)> {
        maps.check(&self.cfg)?;
        let top = self.cfg.stages;
        self.check_rows(
            tape,
            z,
            maps.level_len(top + 1),
            self.cfg.hyper,
            "hyper decoder",
        )?;
        let h = self.h_up.apply(tape, &self.store, z, &maps.up[top]);
        let h = ops::relu(tape, h);
        let h = self.h_out.apply(tape, &self.store, h, &maps.same[top]);
        let c = self.cfg.latent;
        let mu = ops::slice_cols(tape, h, 0, c);
        let raw = ops::slice_cols(tape, h, c, 2 * c);
        Ok((mu, ops::softplus_floor(tape, raw, SIGMA_FLOOR)))
    }

    fn check_rows<T: Real>(
        &self,
        tape: &Tape<T>,
        x: Var,
        rows: usize,
        cols: usize,
        what: &str,
    ) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape != (rows, cols) {
            return Err(Error::Shape(format!(
                "{what} input is {}x{}, expected {rows}x{cols}",
                shape.0, shape.1
            )));
        }
        Ok(())
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.cfg.to_text(), &self.store)
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let ck = read_checkpoint(r)?;
        let cfg = CodecConfig::from_text(&ck.config)?;
        let mut codec = Codec::new(cfg)?;
        codec.store.load_values(ck.tensors)?;
        Ok(codec)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.save(&mut w)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(f))
    }

    /// Parameter handle of the last analysis layer, for gradient probes.
    pub fn analysis_out_weight(&self) -> crate::diff::ParamId {
        self.a_out.weight
    }
}
