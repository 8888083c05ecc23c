//! Browser demo: a synthetic textured shell, rendered by the splatting
//! renderer, trained for a few steps and sent through the codec.

use wasm_bindgen::prelude::*;

use ropcac::diff::Tensor;
use ropcac::io::{synthetic_cloud, VoxelCloud};
use ropcac::metrics::{psnr, Channel};
use ropcac::net::{Codec, CodecConfig};
use ropcac::pipeline::{self, decode, encode, RunManifest, Scene};
use ropcac::render::{Rig, RigPlans, View};

fn js(e: ropcac::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn demo_config() -> CodecConfig {
    CodecConfig {
        hidden: 8,
        latent: 8,
        hyper: 4,
        transformers: 1,
        ..CodecConfig::default()
    }
}

#[wasm_bindgen]
pub struct Demo {
    cloud: VoxelCloud,
    decoded: Option<VoxelCloud>,
    codec: Codec,
    manifest: RunManifest,
    scene: Option<Scene>,
    steps: u32,
    last_loss: f64,
}

impl Demo {
    pub fn create(radius: f64, seed: u32) -> ropcac::Result<Demo> {
        let radius = radius.clamp(4.0, 20.0);
        let manifest = RunManifest {
            epochs: 1,
            lr: "constant:0.003".into(),
            rig: "0:0,120,240".into(),
            image_size: 48,
            seed: seed as u64,
            codec: demo_config(),
            ..RunManifest::default()
        };
        Ok(Demo {
            cloud: synthetic_cloud(radius, seed as u64),
            decoded: None,
            codec: Codec::new(manifest.codec.clone())?,
            manifest,
            scene: None,
            steps: 0,
            last_loss: f64::NAN,
        })
    }

    fn source(&self, decoded: bool) -> &VoxelCloud {
        match (&self.decoded, decoded) {
            (Some(d), true) => d,
            _ => &self.cloud,
        }
    }

    pub fn render_rgba(
        &self,
        decoded: bool,
        azimuth: f64,
        elevation: f64,
        size: usize,
        splat_px: f64,
    ) -> ropcac::Result<Vec<u8>> {
        let cloud = self.source(decoded);
        let size = size.clamp(16, 512);
        let rig = Rig::new(vec![View { elevation, azimuth }], size, size);
        let mut settings = ropcac::render::RasterSettings::for_size(size, size);
        settings.radius = 2.0 * splat_px.clamp(0.5, 8.0) / size as f64;
        let plans = RigPlans::build(&cloud.coords, &rig, Some(settings))?;
        let colors = Tensor::from_vec(
            cloud.len(),
            3,
            cloud.colors.iter().flatten().copied().collect(),
        );
        let img = plans.render(&colors).remove(0);
        Ok(img
            .data
            .chunks(3)
            .flat_map(|p| {
                let [r, g, b] = [0, 1, 2].map(|c| ropcac::io::unit_to_byte(p[c]));
                [r, g, b, 255]
            })
            .collect())
    }

    /// Runs `steps` more training steps on the demo cloud; returns the last loss.
    pub fn train_steps(&mut self, steps: u32) -> ropcac::Result<f64> {
        if self.scene.is_none() {
            self.scene = Some(Scene::new(&self.cloud, &self.codec.cfg, &self.manifest.rig()?)?);
        }
        let scene = std::slice::from_ref(self.scene.as_ref().expect("built above"));
        for _ in 0..steps {
            // A fresh seed per step keeps the noise varying across calls.
            let m = RunManifest {
                seed: self.manifest.seed + self.steps as u64,
                ..self.manifest.clone()
            };
            let h = pipeline::train(&mut self.codec, scene, &m, |_| {})?;
            self.last_loss = h.last().map_or(f64::NAN, |s| s.loss);
            self.steps += 1;
        }
        Ok(self.last_loss)
    }

    /// Encodes and decodes the cloud with the current weights.
    pub fn round_trip_summary(&mut self) -> ropcac::Result<String> {
        let enc = encode(&self.cloud, &self.codec, 255)?;
        let dec = decode(&enc.bitstream, &self.cloud.coords, &self.codec)?;
        self.decoded = Some(dec.cloud);
        Ok(format!(
            "{} points, {} bytes, {:.3} bpp (model estimate {:.0} bytes)",
            self.cloud.len(),
            enc.bitstream.len(),
            enc.bpp(),
            enc.estimate_bytes()
        ))
    }

    pub fn view_psnr_y(&self, azimuth: f64, elevation: f64, size: usize) -> ropcac::Result<f64> {
        let Some(dec) = &self.decoded else {
            return Ok(f64::NAN);
        };
        let rig = Rig::new(vec![View { elevation, azimuth }], size, size);
        let q = pipeline::view_quality(&self.cloud, dec, &rig);
        // MS-SSIM needs larger images than the demo uses; fall back to PSNR alone.
        match q {
            Ok(q) => Ok(q.psnr_y),
            Err(_) => {
                let plans = RigPlans::build(&self.cloud.coords, &rig, None)?;
                let t = |c: &VoxelCloud| {
                    Tensor::from_vec(c.len(), 3, c.colors.iter().flatten().copied().collect())
                };
                let a = plans.render(&t(&self.cloud)).remove(0).clamped();
                let b = plans.render(&t(dec)).remove(0).clamped();
                psnr(&a, &b, Channel::Y)
            }
        }
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(radius: f64, seed: u32) -> Result<Demo, JsError> {
        Demo::create(radius, seed).map_err(js)
    }

    pub fn points(&self) -> usize {
        self.cloud.len()
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// RGBA pixels of one `size²` view; `decoded` shows the last reconstruction.
    pub fn render(
        &self,
        decoded: bool,
        azimuth: f64,
        elevation: f64,
        size: usize,
        splat_px: f64,
    ) -> Result<Vec<u8>, JsError> {
        self.render_rgba(decoded, azimuth, elevation, size, splat_px)
            .map_err(js)
    }

    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        self.train_steps(steps).map_err(js)
    }

    pub fn round_trip(&mut self) -> Result<String, JsError> {
        self.round_trip_summary().map_err(js)
    }

    pub fn psnr_y(&self, azimuth: f64, elevation: f64, size: usize) -> Result<f64, JsError> {
        self.view_psnr_y(azimuth, elevation, size).map_err(js)
    }
}
