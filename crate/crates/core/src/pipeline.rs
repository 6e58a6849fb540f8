//! Synthetic scenes, the staged training pipeline, completion, evaluation
//! and ablation experiments.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, EntryData};
use crate::config::KeyValues;
use crate::erp::{
    apply_mask_gray, make_fov_mask, pixel_lonlat, resize_bicubic, rotate_horizontal, FovMask, FovSpec, Image,
};
use crate::error::{ensure, Error, Result};
use crate::kernels::PadMode;
use crate::metrics::{
    diversity_score, frechet_distance, lateral_face_features, perceptual_loss, seam_discontinuity, FeatureExtractor,
    FeatureStats,
};
use crate::models::{
    adjust, make_adjust_training_pair, random_fov, train_adjustment, train_vqgan, AdjustConfig, AdjustModel, AdjustPair,
    AdjustTrainConfig, Autoencoder, AutoencoderConfig, Discriminator, LossWeights, PairConfig, PerceptualTerm, Variant,
    VqganTrainConfig,
};
use crate::tensor::Tensor;
use crate::transformer::{sample, train_transformer, Replacement, SamplerConfig, SceneConfig, SceneModel, Schedule, TraceRecord, TrainConfig};
use crate::vq::{grid_to_sequence, TokenGrid, TokenSequence};

pub const BUNDLE_VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "config";

/// Independent seed for a named stream derived from a base seed.
pub fn named_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (seed ^ h).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LandmarkKind {
    Block,
    Cylinder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub kind: LandmarkKind,
    pub yaw_deg: f64,
    pub half_width_deg: f64,
    /// Elevation of the top edge; the base sits just below the horizon.
    pub top_deg: f64,
    pub color: [f64; 3],
}

/// Parameters of one procedural panorama.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub zenith: [f64; 3],
    pub horizon: [f64; 3],
    pub ground: [f64; 3],
    pub sun_yaw_deg: f64,
    pub sun_pitch_deg: f64,
    pub sun_color: [f64; 3],
    /// Angular frequency of the ground texture (whole cycles per turn).
    pub ground_cycles: u32,
    pub landmarks: Vec<Landmark>,
}

const BASE_DEG: f64 = -6.0;

fn rgb(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..=hi))
}

impl SceneSpec {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zenith = [rng.random_range(0.05..0.3), rng.random_range(0.1..0.4), rng.random_range(0.4..0.9)];
        let horizon = rgb(&mut rng, 0.55, 0.95);
        let ground = rgb(&mut rng, 0.15, 0.6);
        let sun_yaw_deg = rng.random_range(-180.0..180.0);
        let sun_pitch_deg = rng.random_range(5.0..70.0);
        let sun_color = [1.0, rng.random_range(0.8..1.0), rng.random_range(0.6..0.9)];
        let ground_cycles = rng.random_range(2..=8);
        let n = rng.random_range(1..=4);
        let landmarks = (0..n)
            .map(|_| Landmark {
                kind: if rng.random_bool(0.5) { LandmarkKind::Block } else { LandmarkKind::Cylinder },
                yaw_deg: rng.random_range(-180.0..180.0),
                half_width_deg: rng.random_range(8.0..40.0),
                top_deg: rng.random_range(8.0..45.0),
                color: rgb(&mut rng, 0.1, 0.9),
            })
            .collect();
        Self { seed, zenith, horizon, ground, sun_yaw_deg, sun_pitch_deg, sun_color, ground_cycles, landmarks }
    }

    fn shade(&self, lon: f64, lat: f64) -> [f64; 3] {
        let deg = lat.to_degrees();
        for l in &self.landmarks {
            let d = wrap_angle(lon - l.yaw_deg.to_radians());
            let hw = l.half_width_deg.to_radians();
            if d.abs() < hw && deg < l.top_deg && deg > BASE_DEG {
                let f = match l.kind {
                    LandmarkKind::Block => {
                        if d < 0.0 {
                            0.7
                        } else {
                            1.0
                        }
                    }
                    LandmarkKind::Cylinder => 0.55 + 0.45 * (d / hw * PI / 2.0).cos(),
                };
                return l.color.map(|c| c * f);
            }
        }
        if lat >= 0.0 {
            let t = (lat / (PI / 2.0)).sqrt();
            let sun = [
                self.sun_pitch_deg.to_radians().cos() * self.sun_yaw_deg.to_radians().sin(),
                self.sun_pitch_deg.to_radians().sin(),
                self.sun_pitch_deg.to_radians().cos() * self.sun_yaw_deg.to_radians().cos(),
            ];
            let dir = [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()];
            let cosang = (sun[0] * dir[0] + sun[1] * dir[1] + sun[2] * dir[2]).clamp(-1.0, 1.0);
            let glow = (-(cosang.acos() / 0.25).powi(2)).exp();
            std::array::from_fn(|c| (self.horizon[c] * (1.0 - t) + self.zenith[c] * t) * (1.0 - glow) + self.sun_color[c] * glow)
        } else {
            let tex = 0.8 + 0.2 * (self.ground_cycles as f64 * lon).sin() * (3.0 * lat).cos();
            let dark = 0.6 + 0.4 * (1.0 + lat.sin());
            self.ground.map(|c| c * tex * dark)
        }
    }

    /// Renders at `h x 2h`. The image is cyclically shifted so that the
    /// wrap boundary is the smoothest column boundary of the scene.
    pub fn render(&self, h: usize) -> Result<Image> {
        ensure!(h >= 1, "render height must be positive");
        let w = 2 * h;
        let img = Image::from_fn(h, w, |v, u| {
            let (lon, lat) = pixel_lonlat(v, u, h, w);
            self.shade(lon, lat)
        });
        let diff = |a: usize, b: usize| -> f64 {
            (0..h).map(|y| img.pixel(y, a).iter().zip(img.pixel(y, b)).map(|(p, q)| (p - q).abs()).sum::<f64>()).sum()
        };
        let mut best = (f64::INFINITY, 0);
        for b in 0..w {
            let d = diff(b, (b + 1) % w);
            if d < best.0 {
                best = (d, b);
            }
        }
        Ok(rotate_horizontal(&img, (w - (best.1 + 1)) as i64))
    }

    /// One-line sidecar record.
    pub fn to_line(&self) -> String {
        let c = |v: &[f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let marks: Vec<String> = self
            .landmarks
            .iter()
            .map(|l| {
                let k = if l.kind == LandmarkKind::Block { "block" } else { "cylinder" };
                format!("{k}:{}:{}:{}:{}", l.yaw_deg, l.half_width_deg, l.top_deg, c(&l.color))
            })
            .collect();
        format!(
            "seed={} zenith={} horizon={} ground={} sun={},{} sun_color={} ground_cycles={} landmarks={}",
            self.seed,
            c(&self.zenith),
            c(&self.horizon),
            c(&self.ground),
            self.sun_yaw_deg,
            self.sun_pitch_deg,
            c(&self.sun_color),
            self.ground_cycles,
            marks.join(";")
        )
    }
}

/// `n` procedural panoramas of size `h x 2h` with their scene parameters.
pub fn synth_dataset(n: usize, h: usize, seed: u64) -> Result<Vec<(Image, SceneSpec)>> {
    ensure!(n >= 1, "dataset size must be positive");
    ensure!(h >= 32, "dataset height must be at least 32, got {h}");
    (0..n)
        .map(|i| {
            let spec = SceneSpec::random(named_seed(seed, &format!("scene{i}")));
            Ok((spec.render(h)?, spec))
        })
        .collect()
}

/// Horizontal-rotation augmentation: `copies` randomly rotated versions of
/// each image.
pub fn rotation_augment(images: &[Image], copies: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "rotate"));
    let mut out = Vec::with_capacity(images.len() * copies);
    for img in images {
        for _ in 0..copies {
            out.push(rotate_horizontal(img, rng.random_range(0..img.width() as i64)));
        }
    }
    out
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub samples: usize,
    pub fov: FovSpec,
    pub face_size: usize,
    /// Restrict image metrics to the central region after moving the wrap
    /// boundary to the image centre.
    pub ablation: bool,
    pub seed: u64,
}

/// Everything needed to build and train a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub train_h: usize,
    pub data_n: usize,
    pub data_seed: u64,
    pub ae: AutoencoderConfig,
    pub disc_channels: usize,
    pub scene_d_model: usize,
    pub scene_heads: usize,
    pub scene_blocks: usize,
    pub scene_context: usize,
    pub adjust: AdjustConfig,
    pub vqgan2: VqganTrainConfig,
    pub vqgan1: VqganTrainConfig,
    pub transformer: TrainConfig,
    pub masks_per_image: usize,
    pub adjust_train: AdjustTrainConfig,
    pub pairs_per_image: usize,
    pub sampler: SamplerConfig,
    pub eval: EvalProtocol,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ae = AutoencoderConfig::default();
        let sc = SceneConfig::default();
        let train_h = 64;
        let w_q = 2 * train_h / ae.stride();
        Self {
            train_h,
            data_n: 200,
            data_seed: 0,
            ae,
            disc_channels: 16,
            scene_d_model: sc.d_model,
            scene_heads: sc.heads,
            scene_blocks: sc.blocks,
            scene_context: sc.context,
            adjust: AdjustConfig::default(),
            vqgan2: VqganTrainConfig { seed: 1, ..Default::default() },
            vqgan1: VqganTrainConfig { seed: 2, reseed_every: 0, ..Default::default() },
            transformer: TrainConfig { seed: 3, ..Default::default() },
            masks_per_image: 4,
            adjust_train: AdjustTrainConfig { seed: 4, ..Default::default() },
            pairs_per_image: 2,
            sampler: SamplerConfig::for_width(w_q),
            eval: EvalProtocol { samples: 5, fov: FovSpec::angular(90.0, 90.0), face_size: 32, ablation: false, seed: 5 },
        }
    }
}

fn parse_schedule(s: &str) -> Result<Schedule> {
    match s {
        "raster" => Ok(Schedule::Raster),
        "circular" => Ok(Schedule::Circular),
        _ => Err(Error::Config(format!("unknown schedule `{s}`"))),
    }
}

fn schedule_tag(s: Schedule) -> &'static str {
    match s {
        Schedule::Raster => "raster",
        Schedule::Circular => "circular",
    }
}

fn parse_replacement(s: &str) -> Result<Replacement> {
    match s {
        "tail" => Ok(Replacement::TailOnly),
        "both" => Ok(Replacement::BothEnds),
        _ => Err(Error::Config(format!("unknown replacement policy `{s}`"))),
    }
}

fn replacement_tag(r: Replacement) -> &'static str {
    match r {
        Replacement::TailOnly => "tail",
        Replacement::BothEnds => "both",
    }
}

/// Every key accepted by [`PipelineConfig::apply`].
pub const CONFIG_KEYS: &[&str] = &[
    "train.h",
    "data.n",
    "data.seed",
    "ae.channels",
    "ae.n_z",
    "ae.vocab",
    "ae.downsamples",
    "disc.channels",
    "scene.d_model",
    "scene.heads",
    "scene.blocks",
    "scene.context",
    "adjust.channels",
    "adjust.use_mask",
    "vqgan2.steps",
    "vqgan2.batch",
    "vqgan2.lr",
    "vqgan2.seed",
    "vqgan2.perceptual",
    "vqgan2.gan",
    "vqgan2.adaptive_gan",
    "vqgan2.reseed_every",
    "vqgan1.steps",
    "vqgan1.batch",
    "vqgan1.lr",
    "vqgan1.seed",
    "vqgan1.gan",
    "transformer.steps",
    "transformer.batch",
    "transformer.lr",
    "transformer.seed",
    "transformer.masks_per_image",
    "adjust_train.steps",
    "adjust_train.batch",
    "adjust_train.lr",
    "adjust_train.seed",
    "adjust_train.pairs_per_image",
    "sampler.temperature",
    "sampler.top_k",
    "sampler.seed",
    "sampler.w_p",
    "sampler.schedule",
    "sampler.replacement",
    "eval.samples",
    "eval.fov",
    "eval.face_size",
    "eval.ablation",
    "eval.seed",
];

impl PipelineConfig {
    /// Small preset at `32 x 64` used by tests and quick experiments.
    pub fn smoke() -> Self {
        let ae = AutoencoderConfig { channels: 8, n_z: 8, vocab: 32, downsamples: 3 };
        let train_h = 32;
        let w_q = 2 * train_h / ae.stride();
        Self {
            train_h,
            data_n: 24,
            data_seed: 0,
            ae,
            disc_channels: 4,
            scene_d_model: 32,
            scene_heads: 2,
            scene_blocks: 2,
            scene_context: 64,
            adjust: AdjustConfig { channels: 8, use_mask: true },
            vqgan2: VqganTrainConfig { steps: 300, seed: 1, ..Default::default() },
            vqgan1: VqganTrainConfig { steps: 150, seed: 2, reseed_every: 0, ..Default::default() },
            transformer: TrainConfig { steps: 300, batch: 8, seed: 3, ..Default::default() },
            masks_per_image: 4,
            adjust_train: AdjustTrainConfig { steps: 100, seed: 4, ..Default::default() },
            pairs_per_image: 2,
            sampler: SamplerConfig::for_width(w_q),
            eval: EvalProtocol { samples: 5, fov: FovSpec::angular(90.0, 90.0), face_size: 16, ablation: false, seed: 5 },
        }
    }

    pub fn train_w(&self) -> usize {
        2 * self.train_h
    }

    pub fn token_dims(&self) -> (usize, usize) {
        (self.train_h / self.ae.stride(), self.train_w() / self.ae.stride())
    }

    pub fn scene_config(&self) -> SceneConfig {
        let (h_q, w_q) = self.token_dims();
        SceneConfig {
            vocab: self.ae.vocab,
            h_q,
            w_q,
            d_model: self.scene_d_model,
            heads: self.scene_heads,
            blocks: self.scene_blocks,
            context: self.scene_context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.ae.stride();
        ensure!(self.train_h >= s && self.train_h % s == 0, "training height {} must be a positive multiple of the stride {s}", self.train_h);
        ensure!(self.data_n >= 1, "data.n must be positive");
        ensure!(self.masks_per_image >= 1 && self.pairs_per_image >= 1, "per-image counts must be positive");
        ensure!(self.eval.samples >= 1, "eval.samples must be positive");
        ensure!(self.eval.face_size >= 4 && self.eval.face_size % 4 == 0, "eval.face_size must be a positive multiple of 4");
        self.scene_config().validate()?;
        self.sampler.validate(self.token_dims().1)
    }

    /// Overrides fields from `kv`; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.check_known(CONFIG_KEYS)?;
        for key in kv.keys() {
            let raw = kv.raw(key).unwrap_or_default();
            let num = |_: ()| -> Result<f64> { kv.require(key) };
            let int = |_: ()| -> Result<usize> { kv.require(key) };
            let seed = |_: ()| -> Result<u64> { kv.require(key) };
            let flag = |_: ()| -> Result<bool> { kv.require(key) };
            match key {
                "train.h" => self.train_h = int(())?,
                "data.n" => self.data_n = int(())?,
                "data.seed" => self.data_seed = seed(())?,
                "ae.channels" => self.ae.channels = int(())?,
                "ae.n_z" => self.ae.n_z = int(())?,
                "ae.vocab" => self.ae.vocab = int(())?,
                "ae.downsamples" => self.ae.downsamples = int(())?,
                "disc.channels" => self.disc_channels = int(())?,
                "scene.d_model" => self.scene_d_model = int(())?,
                "scene.heads" => self.scene_heads = int(())?,
                "scene.blocks" => self.scene_blocks = int(())?,
                "scene.context" => self.scene_context = int(())?,
                "adjust.channels" => self.adjust.channels = int(())?,
                "adjust.use_mask" => self.adjust.use_mask = flag(())?,
                "vqgan2.steps" => self.vqgan2.steps = int(())?,
                "vqgan2.batch" => self.vqgan2.batch = int(())?,
                "vqgan2.lr" => self.vqgan2.adam.lr = num(())?,
                "vqgan2.seed" => self.vqgan2.seed = seed(())?,
                "vqgan2.perceptual" => self.vqgan2.perceptual = PerceptualTerm::parse(raw)?,
                "vqgan2.gan" => self.vqgan2.weights.gan = num(())?,
                "vqgan2.adaptive_gan" => self.vqgan2.adaptive_gan = flag(())?,
                "vqgan2.reseed_every" => self.vqgan2.reseed_every = int(())?,
                "vqgan1.steps" => self.vqgan1.steps = int(())?,
                "vqgan1.batch" => self.vqgan1.batch = int(())?,
                "vqgan1.lr" => self.vqgan1.adam.lr = num(())?,
                "vqgan1.seed" => self.vqgan1.seed = seed(())?,
                "vqgan1.gan" => self.vqgan1.weights.gan = num(())?,
                "transformer.steps" => self.transformer.steps = int(())?,
                "transformer.batch" => self.transformer.batch = int(())?,
                "transformer.lr" => self.transformer.adam.lr = num(())?,
                "transformer.seed" => self.transformer.seed = seed(())?,
                "transformer.masks_per_image" => self.masks_per_image = int(())?,
                "adjust_train.steps" => self.adjust_train.steps = int(())?,
                "adjust_train.batch" => self.adjust_train.batch = int(())?,
                "adjust_train.lr" => self.adjust_train.adam.lr = num(())?,
                "adjust_train.seed" => self.adjust_train.seed = seed(())?,
                "adjust_train.pairs_per_image" => self.pairs_per_image = int(())?,
                "sampler.temperature" => self.sampler.temperature = num(())?,
                "sampler.top_k" => self.sampler.top_k = int(())?,
                "sampler.seed" => self.sampler.seed = seed(())?,
                "sampler.w_p" => self.sampler.w_p = int(())?,
                "sampler.schedule" => self.sampler.schedule = parse_schedule(raw)?,
                "sampler.replacement" => self.sampler.replacement = parse_replacement(raw)?,
                "eval.samples" => self.eval.samples = int(())?,
                "eval.fov" => self.eval.fov = FovSpec::parse(raw)?,
                "eval.face_size" => self.eval.face_size = int(())?,
                "eval.ablation" => self.eval.ablation = flag(())?,
                "eval.seed" => self.eval.seed = seed(())?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.h", self.train_h);
        kv.set("data.n", self.data_n);
        kv.set("data.seed", self.data_seed);
        kv.set("ae.channels", self.ae.channels);
        kv.set("ae.n_z", self.ae.n_z);
        kv.set("ae.vocab", self.ae.vocab);
        kv.set("ae.downsamples", self.ae.downsamples);
        kv.set("disc.channels", self.disc_channels);
        kv.set("scene.d_model", self.scene_d_model);
        kv.set("scene.heads", self.scene_heads);
        kv.set("scene.blocks", self.scene_blocks);
        kv.set("scene.context", self.scene_context);
        kv.set("adjust.channels", self.adjust.channels);
        kv.set("adjust.use_mask", self.adjust.use_mask);
        kv.set("vqgan2.steps", self.vqgan2.steps);
        kv.set("vqgan2.batch", self.vqgan2.batch);
        kv.set("vqgan2.lr", self.vqgan2.adam.lr);
        kv.set("vqgan2.seed", self.vqgan2.seed);
        kv.set("vqgan2.perceptual", self.vqgan2.perceptual.tag());
        kv.set("vqgan2.gan", self.vqgan2.weights.gan);
        kv.set("vqgan2.adaptive_gan", self.vqgan2.adaptive_gan);
        kv.set("vqgan2.reseed_every", self.vqgan2.reseed_every);
        kv.set("vqgan1.steps", self.vqgan1.steps);
        kv.set("vqgan1.batch", self.vqgan1.batch);
        kv.set("vqgan1.lr", self.vqgan1.adam.lr);
        kv.set("vqgan1.seed", self.vqgan1.seed);
        kv.set("vqgan1.gan", self.vqgan1.weights.gan);
        kv.set("transformer.steps", self.transformer.steps);
        kv.set("transformer.batch", self.transformer.batch);
        kv.set("transformer.lr", self.transformer.adam.lr);
        kv.set("transformer.seed", self.transformer.seed);
        kv.set("transformer.masks_per_image", self.masks_per_image);
        kv.set("adjust_train.steps", self.adjust_train.steps);
        kv.set("adjust_train.batch", self.adjust_train.batch);
        kv.set("adjust_train.lr", self.adjust_train.adam.lr);
        kv.set("adjust_train.seed", self.adjust_train.seed);
        kv.set("adjust_train.pairs_per_image", self.pairs_per_image);
        kv.set("sampler.temperature", self.sampler.temperature);
        kv.set("sampler.top_k", self.sampler.top_k);
        kv.set("sampler.seed", self.sampler.seed);
        kv.set("sampler.w_p", self.sampler.w_p);
        kv.set("sampler.schedule", schedule_tag(self.sampler.schedule));
        kv.set("sampler.replacement", replacement_tag(self.sampler.replacement));
        kv.set("eval.samples", self.eval.samples);
        kv.set("eval.fov", self.eval.fov.to_text());
        kv.set("eval.face_size", self.eval.face_size);
        kv.set("eval.ablation", self.eval.ablation);
        kv.set("eval.seed", self.eval.seed);
        kv
    }

    pub fn from_kv(base: PipelineConfig, kv: &KeyValues) -> Result<Self> {
        let mut cfg = base;
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trained components of the completion pipeline. Stages fill the
/// components one by one; [`complete`] needs all of them.
#[derive(Clone, Debug)]
pub struct PipelineBundle {
    pub config: PipelineConfig,
    pub vqgan1: Option<Autoencoder>,
    pub vqgan2: Option<Autoencoder>,
    pub scene: Option<SceneModel>,
    pub adjust: Option<AdjustModel>,
}

fn missing(what: &str) -> Error {
    Error::contract(format!("bundle has no trained {what}; run its training stage first"))
}

impl PipelineBundle {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, vqgan1: None, vqgan2: None, scene: None, adjust: None })
    }

    /// All components randomly initialised; VQGAN₁ shares VQGAN₂'s
    /// codebook. Useful for contract checks without training.
    pub fn untrained(config: PipelineConfig, seed: u64) -> Result<Self> {
        let mut b = Self::new(config)?;
        let cfg = &b.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v2 = Autoencoder::new(cfg.ae.clone(), Variant::Vqgan2, &mut rng)?;
        let mut v1 = Autoencoder::new(cfg.ae.clone(), Variant::Vqgan1, &mut rng)?;
        v1.codebook = v2.codebook.clone();
        let scene = SceneModel::new(cfg.scene_config(), &mut rng)?;
        let adj = AdjustModel::new(cfg.adjust.clone(), &mut rng);
        b.vqgan1 = Some(v1);
        b.vqgan2 = Some(v2);
        b.scene = Some(scene);
        b.adjust = Some(adj);
        Ok(b)
    }

    pub fn vqgan1(&self) -> Result<&Autoencoder> {
        self.vqgan1.as_ref().ok_or_else(|| missing("vqgan1"))
    }

    pub fn vqgan2(&self) -> Result<&Autoencoder> {
        self.vqgan2.as_ref().ok_or_else(|| missing("vqgan2"))
    }

    pub fn scene(&self) -> Result<&SceneModel> {
        self.scene.as_ref().ok_or_else(|| missing("transformer"))
    }

    pub fn adjust_model(&self) -> Result<&AdjustModel> {
        self.adjust.as_ref().ok_or_else(|| missing("adjustment network"))
    }

    pub fn is_complete(&self) -> bool {
        self.vqgan1.is_some() && self.vqgan2.is_some() && self.scene.is_some() && self.adjust.is_some()
    }

    /// Dimension compatibility of the present components.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let sc = self.config.scene_config();
        for ae in [&self.vqgan1, &self.vqgan2].into_iter().flatten() {
            ensure!(ae.cfg == self.config.ae, "autoencoder config {:?} differs from the bundle config", ae.cfg);
        }
        if let (Some(a), Some(b)) = (&self.vqgan1, &self.vqgan2) {
            ensure!(a.codebook.dim() == b.codebook.dim() && a.codebook.len() == b.codebook.len(), "codebook shapes differ");
        }
        if let Some(s) = &self.scene {
            ensure!(s.cfg == sc, "transformer config {:?} differs from the bundle config {:?}", s.cfg, sc);
        }
        if let Some(a) = &self.adjust {
            ensure!(a.cfg == self.config.adjust, "adjustment config differs from the bundle config");
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let mut meta = KeyValues::new();
        meta.set("bundle.version", BUNDLE_VERSION);
        let mut parts = Vec::new();
        if let Some(m) = &self.vqgan1 {
            m.to_checkpoint(&mut ck, &mut meta);
            parts.push("vqgan1");
        }
        if let Some(m) = &self.vqgan2 {
            m.to_checkpoint(&mut ck, &mut meta);
            parts.push("vqgan2");
        }
        if let Some(m) = &self.scene {
            m.to_checkpoint(&mut ck, &mut meta);
            parts.push("scene");
        }
        if let Some(m) = &self.adjust {
            m.to_checkpoint(&mut ck, &mut meta);
            parts.push("adjust");
        }
        meta.set("bundle.components", parts.join(","));
        ck.set_meta(&meta.to_text());
        ck.insert(CONFIG_ENTRY, EntryData::U8(self.config.to_kv().to_text().into_bytes()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let fmt = |d: &str| Error::Format { what: "bundle", detail: d.to_string() };
        let meta = KeyValues::parse(&ck.meta().ok_or_else(|| fmt("missing metadata"))?)?;
        let version: u32 = meta.require("bundle.version")?;
        if version != BUNDLE_VERSION {
            return Err(fmt(&format!("unsupported bundle version {version}")));
        }
        let cfg_text = match ck.get(CONFIG_ENTRY) {
            Some(EntryData::U8(b)) => String::from_utf8(b.clone()).map_err(|_| fmt("config is not utf-8"))?,
            _ => return Err(fmt("missing config")),
        };
        let config = PipelineConfig::from_kv(PipelineConfig::default(), &KeyValues::parse(&cfg_text)?)?;
        let parts: String = meta.require("bundle.components")?;
        let has = |p: &str| parts.split(',').any(|x| x == p);
        let b = Self {
            vqgan1: if has("vqgan1") { Some(Autoencoder::from_checkpoint(ck, &meta, Variant::Vqgan1)?) } else { None },
            vqgan2: if has("vqgan2") { Some(Autoencoder::from_checkpoint(ck, &meta, Variant::Vqgan2)?) } else { None },
            scene: if has("scene") { Some(SceneModel::from_checkpoint(ck, &meta)?) } else { None },
            adjust: if has("adjust") { Some(AdjustModel::from_checkpoint(ck, &meta)?) } else { None },
            config,
        };
        b.check()?;
        Ok(b)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn digest(&self) -> String {
        self.to_checkpoint().digest()
    }
}

fn check_training_images(cfg: &PipelineConfig, data: &[Image]) -> Result<()> {
    ensure!(!data.is_empty(), "training set is empty");
    for img in data {
        ensure!(
            img.dims() == (cfg.train_h, cfg.train_w()),
            "training image {:?} differs from the training size {}x{}",
            img.dims(),
            cfg.train_h,
            cfg.train_w()
        );
    }
    Ok(())
}

/// Trains VQGAN₂ (full panoramas, trainable codebook).
pub fn train_vqgan2_stage(bundle: &mut PipelineBundle, data: &[Image]) -> Result<crate::models::VqganLog> {
    let cfg = &bundle.config;
    check_training_images(cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(cfg.vqgan2.seed, "vqgan2.init"));
    let mut model = Autoencoder::new(cfg.ae.clone(), Variant::Vqgan2, &mut rng)?;
    let mut disc = Discriminator::new(cfg.disc_channels, &mut rng);
    let log = train_vqgan(&mut model, &mut disc, &FeatureExtractor::default(), data, &cfg.vqgan2)?;
    bundle.vqgan2 = Some(model);
    Ok(log)
}

/// Trains VQGAN₁ (masked inputs) against a frozen copy of VQGAN₂'s
/// codebook.
pub fn train_vqgan1_stage(bundle: &mut PipelineBundle, data: &[Image]) -> Result<crate::models::VqganLog> {
    let cfg = &bundle.config;
    check_training_images(cfg, data)?;
    let codebook = bundle.vqgan2()?.codebook.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(cfg.vqgan1.seed, "vqgan1.init"));
    let mut model = Autoencoder::new(cfg.ae.clone(), Variant::Vqgan1, &mut rng)?;
    model.codebook = codebook;
    let mut disc = Discriminator::new(cfg.disc_channels, &mut rng);
    let vcfg = VqganTrainConfig { data_init: false, reseed_every: 0, ..cfg.vqgan1.clone() };
    let log = train_vqgan(&mut model, &mut disc, &FeatureExtractor::default(), data, &vcfg)?;
    bundle.vqgan1 = Some(model);
    Ok(log)
}

/// Training sequences: conditioning tokens from VQGAN₁ on a randomly
/// masked, rotated panorama, targets from VQGAN₂ on the full one.
pub fn transformer_sequences(bundle: &PipelineBundle, data: &[Image]) -> Result<Vec<TokenSequence>> {
    let cfg = &bundle.config;
    check_training_images(cfg, data)?;
    let (v1, v2) = (bundle.vqgan1()?, bundle.vqgan2()?);
    let (h_q, w_q) = cfg.token_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(cfg.transformer.seed, "transformer.data"));
    let mut out = Vec::with_capacity(data.len() * cfg.masks_per_image);
    for img in data {
        for _ in 0..cfg.masks_per_image {
            let rot = rotate_horizontal(img, rng.random_range(0..img.width() as i64));
            let full = v2.encode(&rot)?;
            let mask = make_fov_mask(&random_fov(&mut rng), rot.height(), rot.width())?;
            let cond = v1.encode_with(&apply_mask_gray(&rot, &mask)?, &v2.codebook)?;
            let known = mask.downsample_all(h_q, w_q)?;
            let mut mixed = full.clone();
            for (i, &k) in known.iter().enumerate() {
                if k {
                    mixed.set(i / w_q, i % w_q, cond.get(i / w_q, i % w_q));
                }
            }
            out.push(grid_to_sequence(&mixed, &known)?);
        }
    }
    Ok(out)
}

pub fn train_transformer_stage(bundle: &mut PipelineBundle, data: &[Image]) -> Result<crate::transformer::TrainLog> {
    let seqs = transformer_sequences(bundle, data)?;
    let cfg = &bundle.config;
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(cfg.transformer.seed, "transformer.init"));
    let mut model = SceneModel::new(cfg.scene_config(), &mut rng)?;
    let log = train_transformer(&mut model, &seqs, &cfg.transformer)?;
    bundle.scene = Some(model);
    Ok(log)
}

/// Adjustment pairs built from VQGAN₂ reconstructions.
pub fn adjust_pairs(bundle: &PipelineBundle, data: &[Image]) -> Result<Vec<AdjustPair>> {
    let cfg = &bundle.config;
    check_training_images(cfg, data)?;
    let v2 = bundle.vqgan2()?;
    let pc = PairConfig::default();
    let mut pairs = Vec::with_capacity(data.len() * cfg.pairs_per_image);
    for (i, img) in data.iter().enumerate() {
        for j in 0..cfg.pairs_per_image {
            let seed = named_seed(cfg.adjust_train.seed, &format!("pair{i}.{j}"));
            pairs.push(make_adjust_training_pair(img, v2, &pc, seed)?);
        }
    }
    Ok(pairs)
}

pub fn train_adjust_stage(bundle: &mut PipelineBundle, data: &[Image]) -> Result<Vec<f64>> {
    let pairs = adjust_pairs(bundle, data)?;
    let cfg = &bundle.config;
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(cfg.adjust_train.seed, "adjust.init"));
    let mut model = AdjustModel::new(cfg.adjust.clone(), &mut rng);
    let mut disc = Discriminator::new(cfg.disc_channels, &mut rng);
    let losses = train_adjustment(&mut model, &mut disc, &FeatureExtractor::default(), &pairs, &cfg.adjust_train)?;
    bundle.adjust = Some(model);
    Ok(losses)
}

/// Runs all four training stages in order.
pub fn train_all(config: PipelineConfig, data: &[Image]) -> Result<PipelineBundle> {
    let mut b = PipelineBundle::new(config)?;
    train_vqgan2_stage(&mut b, data)?;
    train_vqgan1_stage(&mut b, data)?;
    train_transformer_stage(&mut b, data)?;
    train_adjust_stage(&mut b, data)?;
    Ok(b)
}

/// Completion stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Downsize,
    GrayFill,
    Encode,
    Quantize,
    Sample,
    Decode,
    Upscale,
    Adjust,
}

impl Stage {
    pub const ORDER: [Stage; 8] =
        [Stage::Downsize, Stage::GrayFill, Stage::Encode, Stage::Quantize, Stage::Sample, Stage::Decode, Stage::Upscale, Stage::Adjust];
}

/// Output of a stage as seen by an observer.
#[derive(Clone, Copy, Debug)]
pub enum StageValue<'a> {
    Image(&'a Image),
    /// `h_q x w_q x n_z` encoder features.
    Features(&'a Tensor),
    Grid(&'a TokenGrid),
}

impl StageValue<'_> {
    /// `(height, width, channels)`; token grids report one channel.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            StageValue::Image(i) => (i.height(), i.width(), 3),
            StageValue::Features(t) => (t.shape()[0], t.shape()[1], t.shape()[2]),
            StageValue::Grid(g) => (g.height(), g.width(), 1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StageEvent<'a> {
    pub stage: Stage,
    /// Sample index for per-sample stages.
    pub sample: Option<usize>,
    pub value: StageValue<'a>,
}

pub struct CompleteOptions<'a> {
    /// Decoder padding; [`PadMode::CircularWidth`] gives the
    /// circular-padding arm.
    pub decode_pad: PadMode,
    pub observer: Option<&'a mut dyn FnMut(&StageEvent)>,
}

impl Default for CompleteOptions<'_> {
    fn default() -> Self {
        Self { decode_pad: PadMode::Zero, observer: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub image: Image,
    pub tokens: TokenGrid,
    pub trace: Vec<TraceRecord>,
    pub seed: u64,
}

/// Completes `input` (known where `mask` is set) `n_samples` times with
/// seeds `sampler.seed + i`.
pub fn complete(bundle: &PipelineBundle, input: &Image, mask: &FovMask, n_samples: usize, sampler: &SamplerConfig) -> Result<Vec<Image>> {
    Ok(complete_with(bundle, input, mask, n_samples, sampler, CompleteOptions::default())?.into_iter().map(|c| c.image).collect())
}

pub fn complete_with(
    bundle: &PipelineBundle,
    input: &Image,
    mask: &FovMask,
    n_samples: usize,
    sampler: &SamplerConfig,
    mut opts: CompleteOptions,
) -> Result<Vec<Completion>> {
    let cfg = &bundle.config;
    let (v1, v2, scene, adj) = (bundle.vqgan1()?, bundle.vqgan2()?, bundle.scene()?, bundle.adjust_model()?);
    bundle.check()?;
    input.ensure_panorama()?;
    let (h, w) = input.dims();
    let (th, tw) = (cfg.train_h, cfg.train_w());
    ensure!(2 * h >= th, "input {h}x{w} is smaller than half the training size {th}x{tw}");
    ensure!((mask.height(), mask.width()) == (h, w), "mask {}x{} differs from input {h}x{w}", mask.height(), mask.width());
    ensure!(n_samples >= 1, "need at least one sample");
    let (h_q, w_q) = cfg.token_dims();
    sampler.validate(w_q)?;
    let mut emit = |stage: Stage, sample: Option<usize>, value: StageValue| {
        if let Some(f) = opts.observer.as_mut() {
            f(&StageEvent { stage, sample, value });
        }
    };

    let small = resize_bicubic(input, th, tw, true)?;
    emit(Stage::Downsize, None, StageValue::Image(&small));
    let small_mask = mask.at_resolution(th, tw)?;
    let filled = apply_mask_gray(&small, &small_mask)?;
    emit(Stage::GrayFill, None, StageValue::Image(&filled));
    let feats = v1.encode_features(&filled)?;
    emit(Stage::Encode, None, StageValue::Features(&feats));
    let known = small_mask.downsample_all(h_q, w_q)?;
    let tokens = v2.codebook.assign(feats.data())?;
    let grid = TokenGrid::new(h_q, w_q, v2.codebook.len(), tokens)?.masked(&known)?;
    emit(Stage::Quantize, None, StageValue::Grid(&grid));

    let original = apply_mask_gray(input, mask)?;
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sc = sampler.clone().with_seed(sampler.seed.wrapping_add(i as u64));
        let s = sample(scene, &grid, &sc)?;
        emit(Stage::Sample, Some(i), StageValue::Grid(&s.grid));
        let decoded = match sc.schedule {
            Schedule::Circular => v2.decode_wrapped(&s.grid, w_q / 2, opts.decode_pad)?,
            Schedule::Raster => v2.decode(&s.grid, opts.decode_pad)?,
        };
        emit(Stage::Decode, Some(i), StageValue::Image(&decoded));
        let up = resize_bicubic(&decoded, h, w, true)?;
        emit(Stage::Upscale, Some(i), StageValue::Image(&up));
        let y = adjust(adj, &up, &original, mask)?;
        emit(Stage::Adjust, Some(i), StageValue::Image(&y));
        out.push(Completion { image: y, tokens: s.grid, trace: s.trace, seed: sc.seed });
    }
    Ok(out)
}

/// Central `H/2 x W/2` region after moving the wrap boundary to the image
/// centre.
pub fn central_region(img: &Image) -> Result<Image> {
    let (h, w) = img.dims();
    let r = rotate_horizontal(img, (w / 2) as i64);
    r.crop(h / 4, w / 4, h / 2, w / 2)
}

/// Feature vectors used by the Fréchet analog: lateral cubemap faces, or
/// the pooled central region in ablation mode.
pub fn fid_features(ext: &FeatureExtractor, img: &Image, protocol: &EvalProtocol) -> Result<Vec<Vec<f64>>> {
    if protocol.ablation {
        Ok(vec![ext.pooled(&central_region(img)?)?])
    } else {
        lateral_face_features(ext, img, protocol.face_size)
    }
}

pub fn fid_analog(ext: &FeatureExtractor, real: &[Image], fake: &[Image], protocol: &EvalProtocol) -> Result<f64> {
    let collect = |set: &[Image]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for img in set {
            out.extend(fid_features(ext, img, protocol)?);
        }
        Ok(out)
    };
    frechet_distance(&FeatureStats::from_samples(&collect(real)?)?, &FeatureStats::from_samples(&collect(fake)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub input: usize,
    pub sample: usize,
    pub seed: u64,
    pub seam: f64,
    pub ws_psnr_known: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub schedule: Schedule,
    pub decode_pad: PadMode,
    pub bundle_digest: String,
    pub inputs: usize,
    pub fid: f64,
    pub fid_real_count: usize,
    pub fid_fake_count: usize,
    /// Worst ws_psnr over the known regions; `inf` when all are preserved.
    pub ws_psnr_known_min: f64,
    pub seam_mean: f64,
    pub diversity_mean: f64,
    pub diversity_count: usize,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let p = &self.protocol;
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("protocol.samples", p.samples.to_string());
        line("protocol.fov", p.fov.to_text());
        line("protocol.face_size", p.face_size.to_string());
        line("protocol.ablation", p.ablation.to_string());
        line("protocol.seed", p.seed.to_string());
        line("protocol.schedule", schedule_tag(self.schedule).to_string());
        line("protocol.decode_pad", format!("{:?}", self.decode_pad));
        line("bundle.digest", self.bundle_digest.clone());
        line("inputs", self.inputs.to_string());
        line("fid", self.fid.to_string());
        line("fid.real_count", self.fid_real_count.to_string());
        line("fid.fake_count", self.fid_fake_count.to_string());
        line("ws_psnr_known.min", self.ws_psnr_known_min.to_string());
        line("ws_psnr_known.count", self.records.len().to_string());
        line("seam.mean", self.seam_mean.to_string());
        line("seam.count", self.records.len().to_string());
        line("diversity.mean", self.diversity_mean.to_string());
        line("diversity.count", self.diversity_count.to_string());
        s.push_str("# records\n");
        for r in &self.records {
            s.push_str(&format!(
                "input={} sample={} seed={} seam={} ws_psnr_known={}\n",
                r.input, r.sample, r.seed, r.seam, r.ws_psnr_known
            ));
        }
        s
    }
}

/// Completes every test image under `protocol` and reports the metrics.
/// Sample `j` of input `i` uses sampler seed `protocol.seed + i * samples + j`.
pub fn evaluate(
    bundle: &PipelineBundle,
    testset: &[Image],
    protocol: &EvalProtocol,
    sampler: &SamplerConfig,
    decode_pad: PadMode,
) -> Result<(EvalReport, Vec<Vec<Completion>>)> {
    ensure!(!testset.is_empty(), "test set is empty");
    let ext = FeatureExtractor::default();
    let mut records = Vec::new();
    let mut fakes = Vec::new();
    let mut all = Vec::with_capacity(testset.len());
    let mut div_total = 0.0;
    let mut div_count = 0;
    let mut worst = f64::INFINITY;
    for (i, gt) in testset.iter().enumerate() {
        let mask = make_fov_mask(&protocol.fov, gt.height(), gt.width())?;
        let input = apply_mask_gray(gt, &mask)?;
        let sc = sampler.clone().with_seed(protocol.seed.wrapping_add((i * protocol.samples) as u64));
        let outs = complete_with(bundle, &input, &mask, protocol.samples, &sc, CompleteOptions { decode_pad, observer: None })?;
        for (j, c) in outs.iter().enumerate() {
            let wp = crate::erp::ws_psnr(&apply_mask_gray(&c.image, &mask)?, &input)?;
            worst = worst.min(wp);
            records.push(SampleRecord { input: i, sample: j, seed: c.seed, seam: seam_discontinuity(&c.image), ws_psnr_known: wp });
            fakes.push(c.image.clone());
        }
        if outs.len() >= 2 {
            let imgs: Vec<Image> = if protocol.ablation {
                outs.iter().map(|c| central_region(&c.image)).collect::<Result<_>>()?
            } else {
                outs.iter().map(|c| c.image.clone()).collect()
            };
            div_total += diversity_score(&ext, &imgs)?;
            div_count += 1;
        }
        all.push(outs);
    }
    let per = |set: &[Image]| if protocol.ablation { set.len() } else { 4 * set.len() };
    let fid = fid_analog(&ext, testset, &fakes, protocol)?;
    let seam_mean = records.iter().map(|r| r.seam).sum::<f64>() / records.len() as f64;
    let report = EvalReport {
        protocol: protocol.clone(),
        schedule: sampler.schedule,
        decode_pad,
        bundle_digest: bundle.digest(),
        inputs: testset.len(),
        fid,
        fid_real_count: per(testset),
        fid_fake_count: per(&fakes),
        ws_psnr_known_min: worst,
        seam_mean,
        diversity_mean: if div_count > 0 { div_total / div_count as f64 } else { 0.0 },
        diversity_count: div_count,
        records,
    };
    Ok((report, all))
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let ln_choose = |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    (wins..=n).map(|k| (ln_choose(k) - n as f64 * 2f64.ln()).exp()).sum::<f64>().min(1.0)
}

/// Inference-only arms of the sampling ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingArm {
    Raster,
    CircularPadding,
    CircularInference,
}

impl SamplingArm {
    pub const ALL: [SamplingArm; 3] = [SamplingArm::Raster, SamplingArm::CircularPadding, SamplingArm::CircularInference];

    pub fn tag(self) -> &'static str {
        match self {
            SamplingArm::Raster => "raster",
            SamplingArm::CircularPadding => "circular-padding",
            SamplingArm::CircularInference => "circular-inference",
        }
    }

    pub fn settings(self, base: &SamplerConfig) -> (SamplerConfig, PadMode) {
        match self {
            SamplingArm::Raster => (base.clone().with_schedule(Schedule::Raster), PadMode::Zero),
            SamplingArm::CircularPadding => (base.clone().with_schedule(Schedule::Raster), PadMode::CircularWidth),
            SamplingArm::CircularInference => (base.clone().with_schedule(Schedule::Circular), PadMode::Zero),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub base: PipelineConfig,
    pub seeds: Vec<u64>,
    /// Inputs per seed in the sampling comparison.
    pub test_n: usize,
    pub samples_per_input: usize,
    /// Held-out images per seed in the loss-term comparison.
    pub loss_test_n: usize,
    /// Steps of each VQGAN₂ in the loss-term comparison.
    pub loss_steps: usize,
    /// Weights shared by the loss arms; `ws_perc` scales the compared term.
    pub loss_weights: LossWeights,
    pub run_sampling: bool,
    pub run_loss: bool,
}

impl AblationConfig {
    pub fn new(base: PipelineConfig) -> Self {
        Self {
            base,
            seeds: vec![11, 12, 13],
            test_n: 10,
            samples_per_input: 5,
            loss_test_n: 20,
            loss_steps: 1200,
            loss_weights: LossWeights { gan: 0.0, ws_perc: 10.0, ..LossWeights::default() },
            run_sampling: true,
            run_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSeedResult {
    pub seed: u64,
    pub bundle_digest: String,
    /// Per arm: the bundle digest seen by that arm's report.
    pub arm_digests: Vec<String>,
    /// Per arm: per-sample seam values in a fixed order.
    pub seams: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSeedResult {
    pub seed: u64,
    /// Central-band perceptual error per loss arm, in `LOSS_ARMS` order.
    pub central_error: Vec<f64>,
}

pub const LOSS_ARMS: [PerceptualTerm; 3] = [PerceptualTerm::WsPerceptual, PerceptualTerm::Perceptual, PerceptualTerm::WsL1];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub sampling: Vec<SamplingSeedResult>,
    pub loss: Vec<LossSeedResult>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl AblationReport {
    /// `(wins, pairs, p)` of circular inference against raster over all
    /// paired samples.
    pub fn seam_sign_test(&self) -> (usize, usize, f64) {
        let (ri, ci) = (0, 2);
        let mut wins = 0;
        let mut n = 0;
        for s in &self.sampling {
            for (r, c) in s.seams[ri].iter().zip(&s.seams[ci]) {
                if r != c {
                    n += 1;
                    wins += usize::from(c < r);
                }
            }
        }
        (wins, n, sign_test_p(wins, n))
    }

    /// Seeds on which the circular-inference mean seam is below raster's.
    pub fn seam_seed_wins(&self) -> usize {
        self.sampling.iter().filter(|s| mean(&s.seams[2]) < mean(&s.seams[0])).count()
    }

    pub fn arms_share_checkpoint(&self) -> bool {
        self.sampling.iter().all(|s| s.arm_digests.iter().all(|d| *d == s.bundle_digest))
    }

    /// Seeds on which WS-perceptual beats both other loss arms.
    pub fn loss_seed_wins(&self) -> usize {
        self.loss.iter().filter(|l| l.central_error[0] < l.central_error[1] && l.central_error[0] < l.central_error[2]).count()
    }

    /// WS-perceptual has the lowest mean over seeds and wins on a majority
    /// of seeds.
    pub fn loss_verdict(&self) -> bool {
        let m = self.loss_means();
        !self.loss.is_empty() && m[0] < m[1] && m[0] < m[2] && 2 * self.loss_seed_wins() > self.loss.len()
    }

    pub fn loss_means(&self) -> Vec<f64> {
        (0..LOSS_ARMS.len()).map(|a| mean(&self.loss.iter().map(|l| l.central_error[a]).collect::<Vec<_>>())).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.sampling {
            for (a, arm) in SamplingArm::ALL.iter().enumerate() {
                s.push_str(&format!(
                    "sampling seed={} arm={} digest={} seam.mean={} seam.count={}\n",
                    r.seed,
                    arm.tag(),
                    r.arm_digests[a],
                    mean(&r.seams[a]),
                    r.seams[a].len()
                ));
            }
        }
        if !self.sampling.is_empty() {
            let (w, n, p) = self.seam_sign_test();
            s.push_str(&format!("verdict.seam circular-inference<raster pairs={n} wins={w} sign_test_p={p} seeds_won={}/{}\n", self.seam_seed_wins(), self.sampling.len()));
            s.push_str(&format!("verdict.same_checkpoint = {}\n", self.arms_share_checkpoint()));
        }
        for r in &self.loss {
            for (a, arm) in LOSS_ARMS.iter().enumerate() {
                s.push_str(&format!("loss seed={} arm={} central_perceptual={}\n", r.seed, arm.tag(), r.central_error[a]));
            }
        }
        if !self.loss.is_empty() {
            let m = self.loss_means();
            s.push_str(&format!(
                "verdict.loss ws-perceptual<perceptual={} ws-perceptual<ws-l1={} seeds_won={}/{}\n",
                m[0] < m[1],
                m[0] < m[2],
                self.loss_seed_wins(),
                self.loss.len()
            ));
        }
        s
    }
}

/// Perceptual error restricted to the middle half of the rows.
pub fn central_band_error(ext: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    let h = a.height();
    let (r0, rows) = (h / 4, h / 2);
    perceptual_loss(ext, &a.crop(r0, 0, rows, a.width())?, &b.crop(r0, 0, rows, b.width())?)
}

fn seeded(base: &PipelineConfig, seed: u64) -> PipelineConfig {
    let mut c = base.clone();
    c.data_seed = named_seed(seed, "data");
    c.vqgan2.seed = named_seed(seed, "vqgan2");
    c.vqgan1.seed = named_seed(seed, "vqgan1");
    c.transformer.seed = named_seed(seed, "transformer");
    c.adjust_train.seed = named_seed(seed, "adjust");
    c
}

fn images(n: usize, h: usize, seed: u64) -> Result<Vec<Image>> {
    Ok(synth_dataset(n, h, seed)?.into_iter().map(|(i, _)| i).collect())
}

/// Runs the sampling ablation (three inference arms on one trained bundle
/// per seed) and the loss-term ablation (three VQGAN₂ variants per seed).
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    ensure!(!cfg.seeds.is_empty(), "ablation needs at least one seed");
    let mut report = AblationReport::default();
    let ext = FeatureExtractor::default();
    for &seed in &cfg.seeds {
        let pc = seeded(&cfg.base, seed);
        let train = images(pc.data_n, pc.train_h, pc.data_seed)?;
        if cfg.run_sampling {
            let test = images(cfg.test_n, pc.train_h, named_seed(seed, "test"))?;
            let bundle = train_all(pc.clone(), &train)?;
            let digest = bundle.digest();
            let protocol = EvalProtocol { samples: cfg.samples_per_input, ablation: true, ..pc.eval.clone() };
            let mut seams = Vec::new();
            let mut digests = Vec::new();
            for arm in SamplingArm::ALL {
                let (sc, pad) = arm.settings(&pc.sampler);
                let (rep, _) = evaluate(&bundle, &test, &protocol, &sc, pad)?;
                seams.push(rep.records.iter().map(|r| r.seam).collect());
                digests.push(rep.bundle_digest);
            }
            report.sampling.push(SamplingSeedResult { seed, bundle_digest: digest, arm_digests: digests, seams });
        }
        if cfg.run_loss {
            let test = images(cfg.loss_test_n, pc.train_h, named_seed(seed, "loss-test"))?;
            let mut errs = Vec::new();
            for term in LOSS_ARMS {
                let mut c = pc.clone();
                c.vqgan2.steps = cfg.loss_steps;
                c.vqgan2.perceptual = term;
                c.vqgan2.weights = cfg.loss_weights;
                let mut b = PipelineBundle::new(c)?;
                train_vqgan2_stage(&mut b, &train)?;
                let v2 = b.vqgan2()?;
                let mut e = Vec::with_capacity(test.len());
                for img in &test {
                    e.push(central_band_error(&ext, &crate::models::Reconstructor::reconstruct(v2, img)?, img)?);
                }
                errs.push(mean(&e));
            }
            report.loss.push(LossSeedResult { seed, central_error: errs });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn tiny_bundle() -> PipelineBundle {
        PipelineBundle::untrained(PipelineConfig::smoke(), 7).unwrap()
    }

    #[test]
    fn synth_is_deterministic_and_wrap_continuous() {
        let a = synth_dataset(6, 32, 3).unwrap();
        let b = synth_dataset(6, 32, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].0, synth_dataset(1, 32, 4).unwrap()[0].0);
        for (img, spec) in &a {
            assert_eq!(img.dims(), (32, 64));
            assert!(seam_discontinuity(img) < 1e-6, "seam {}", seam_discontinuity(img));
            assert!(spec.to_line().starts_with(&format!("seed={}", spec.seed)));
        }
    }

    #[test]
    fn synth_budget_and_errors() {
        let t = Instant::now();
        let d = synth_dataset(100, 64, 0).unwrap();
        assert!(t.elapsed().as_secs_f64() < 10.0, "took {:?}", t.elapsed());
        assert!(d.iter().all(|(i, _)| seam_discontinuity(i) < 1e-6));
        assert!(synth_dataset(0, 64, 0).is_err());
        assert!(synth_dataset(1, 16, 0).is_err());
    }

    #[test]
    fn rotation_augment_preserves_content() {
        let d: Vec<Image> = synth_dataset(2, 32, 1).unwrap().into_iter().map(|x| x.0).collect();
        let r = rotation_augment(&d, 3, 9);
        assert_eq!(r.len(), 6);
        let sum = |i: &Image| i.data().iter().sum::<f64>();
        assert!((sum(&r[4]) - sum(&d[1])).abs() < 1e-9);
        assert_eq!(r, rotation_augment(&d, 3, 9));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = PipelineConfig::smoke();
        let back = PipelineConfig::from_kv(PipelineConfig::default(), &c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut kv = KeyValues::new();
        kv.set("nope", 1);
        assert!(PipelineConfig::from_kv(c.clone(), &kv).is_err());
        let kv = KeyValues::parse("sampler.schedule = diagonal").unwrap();
        assert!(PipelineConfig::from_kv(c.clone(), &kv).is_err());
        let kv = KeyValues::parse("train.h = 36").unwrap();
        assert!(PipelineConfig::from_kv(c.clone(), &kv).is_err());
        let kv = KeyValues::parse("sampler.w_p = 5").unwrap();
        assert!(PipelineConfig::from_kv(c, &kv).is_err());
        assert_eq!(CONFIG_KEYS.len(), PipelineConfig::default().to_kv().keys().count());
    }

    #[test]
    fn bundle_round_trip_with_partial_components() {
        let full = tiny_bundle();
        let back = PipelineBundle::from_checkpoint(&full.to_checkpoint()).unwrap();
        assert_eq!(back.digest(), full.digest());
        assert!(back.is_complete());
        let mut part = PipelineBundle::new(PipelineConfig::smoke()).unwrap();
        part.vqgan2 = full.vqgan2.clone();
        let back = PipelineBundle::from_checkpoint(&part.to_checkpoint()).unwrap();
        assert!(back.vqgan2.is_some() && back.vqgan1.is_none() && back.scene.is_none());
        let img = Image::filled(32, 64, [0.5; 3]);
        assert!(complete(&back, &img, &FovMask::empty(32, 64), 1, &back.config.sampler).is_err());
    }

    #[test]
    fn bundle_rejects_wrong_version() {
        let mut ck = tiny_bundle().to_checkpoint();
        let meta = ck.meta().unwrap().replace("bundle.version = 1", "bundle.version = 99");
        ck.set_meta(&meta);
        assert!(PipelineBundle::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn complete_contracts() {
        let b = tiny_bundle();
        let gt = synth_dataset(1, 32, 5).unwrap().remove(0).0;
        let mask = make_fov_mask(&FovSpec::angular(90.0, 90.0), 32, 64).unwrap();
        let input = apply_mask_gray(&gt, &mask).unwrap();
        let outs = complete(&b, &input, &mask, 2, &b.config.sampler).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.dims(), (32, 64));
            assert_eq!(apply_mask_gray(o, &mask).unwrap(), input);
        }
        let bad = Image::filled(32, 32, [0.5; 3]);
        assert!(complete(&b, &bad, &FovMask::empty(32, 32), 1, &b.config.sampler).is_err());
        let small = Image::filled(8, 16, [0.5; 3]);
        assert!(complete(&b, &small, &FovMask::empty(8, 16), 1, &b.config.sampler).is_err());
        assert!(complete(&b, &input, &FovMask::empty(16, 32), 1, &b.config.sampler).is_err());
        assert!(complete(&b, &input, &mask, 0, &b.config.sampler).is_err());
    }

    #[test]
    fn all_known_mask_returns_input() {
        let b = tiny_bundle();
        let gt = synth_dataset(1, 32, 6).unwrap().remove(0).0;
        let mask = make_fov_mask(&FovSpec::full(), 32, 64).unwrap();
        assert!(mask.all_known());
        assert_eq!(complete(&b, &gt, &mask, 1, &b.config.sampler).unwrap()[0], gt);
    }

    #[test]
    fn stages_run_in_order_with_expected_dims() {
        let b = tiny_bundle();
        let gt = synth_dataset(1, 64, 2).unwrap().remove(0).0;
        let mask = make_fov_mask(&FovSpec::angular(120.0, 90.0), 64, 128).unwrap();
        let mut seen = Vec::new();
        let mut obs = |e: &StageEvent| seen.push((e.stage, e.sample, e.value.dims()));
        let opts = CompleteOptions { decode_pad: PadMode::Zero, observer: Some(&mut obs) };
        complete_with(&b, &apply_mask_gray(&gt, &mask).unwrap(), &mask, 2, &b.config.sampler, opts).unwrap();
        let stages: Vec<Stage> = seen.iter().map(|s| s.0).collect();
        let mut expect = Stage::ORDER[..4].to_vec();
        for _ in 0..2 {
            expect.extend_from_slice(&Stage::ORDER[4..]);
        }
        assert_eq!(stages, expect);
        assert_eq!(seen[0].2, (32, 64, 3));
        assert_eq!(seen[2].2, (4, 8, 8));
        assert_eq!(seen[3].2, (4, 8, 1));
        assert_eq!(seen[5].2, (32, 64, 3));
        assert_eq!(seen[6].2, (64, 128, 3));
        assert_eq!(seen[7].2, (64, 128, 3));
        assert_eq!(seen[8].1, Some(1));
    }

    #[test]
    fn fid_of_set_against_itself_is_zero() {
        let d: Vec<Image> = synth_dataset(3, 32, 8).unwrap().into_iter().map(|x| x.0).collect();
        let ext = FeatureExtractor::default();
        let p = PipelineConfig::smoke().eval;
        assert!(fid_analog(&ext, &d, &d, &p).unwrap().abs() < 1e-6);
        let pa = EvalProtocol { ablation: true, ..p };
        assert!(fid_analog(&ext, &d, &d, &pa).unwrap().abs() < 1e-6);
    }

    #[test]
    fn evaluation_report_is_reproducible() {
        let b = tiny_bundle();
        let d: Vec<Image> = synth_dataset(2, 32, 9).unwrap().into_iter().map(|x| x.0).collect();
        let p = EvalProtocol { samples: 2, ..b.config.eval.clone() };
        let (r1, _) = evaluate(&b, &d, &p, &b.config.sampler, PadMode::Zero).unwrap();
        let (r2, _) = evaluate(&b, &d, &p, &b.config.sampler, PadMode::Zero).unwrap();
        assert_eq!(r1.to_text(), r2.to_text());
        assert_eq!(r1.records.len(), 4);
        assert_eq!(r1.ws_psnr_known_min, f64::INFINITY);
        assert_eq!(r1.fid_real_count, 8);
        assert!(r1.to_text().contains("ws_psnr_known.min = inf"));
        assert!(evaluate(&b, &[], &p, &b.config.sampler, PadMode::Zero).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(3, 3) - 0.125).abs() < 1e-12);
        assert!((sign_test_p(5, 5) - 1.0 / 32.0).abs() < 1e-12);
        assert!((sign_test_p(0, 7) - 1.0).abs() < 1e-12);
        assert!((sign_test_p(2, 3) - 0.5).abs() < 1e-12);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }

    #[test]
    fn central_region_moves_the_seam_to_the_middle() {
        let img = Image::from_fn(8, 16, |_, x| [x as f64 / 16.0, 0.0, 0.0]);
        let c = central_region(&img).unwrap();
        assert_eq!(c.dims(), (4, 8));
        assert_eq!(c.pixel(0, 3)[0], 15.0 / 16.0);
        assert_eq!(c.pixel(0, 4)[0], 0.0);
    }

    #[test]
    fn named_seeds_differ() {
        assert_ne!(named_seed(1, "a"), named_seed(1, "b"));
        assert_ne!(named_seed(1, "a"), named_seed(2, "a"));
        assert_eq!(named_seed(1, "a"), named_seed(1, "a"));
    }
}
