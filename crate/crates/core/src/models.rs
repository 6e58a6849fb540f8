//! Autoencoders with a VQ bottleneck, the patch discriminator, the
//! adjustment U-net and their training procedures.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, EntryData};
use crate::config::KeyValues;
use crate::erp::{apply_mask_gray, composite_known, make_fov_mask, resize_bicubic, rotate_horizontal, FovMask, FovSpec, Image};
use crate::error::{ensure, Error, Result};
use crate::kernels::PadMode;
use crate::metrics::{l1_graph, perceptual_loss_graph, FeatureExtractor, SpatialWeighting};
use crate::nn::Conv;
use crate::params::{AdamConfig, Bound, ParamId, ParameterSet};
use crate::tensor::Tensor;
use crate::vq::{dequantize, quantize_graph, Codebook, TokenGrid};

const LEAK: f64 = 0.2;
const ZNORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Encodes gray-masked inputs.
    Vqgan1,
    /// Encodes and decodes complete panoramas.
    Vqgan2,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Vqgan1 => "vqgan1",
            Variant::Vqgan2 => "vqgan2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vqgan1" => Ok(Variant::Vqgan1),
            "vqgan2" => Ok(Variant::Vqgan2),
            _ => Err(Error::Config(format!("unknown autoencoder variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub channels: usize,
    pub n_z: usize,
    pub vocab: usize,
    pub downsamples: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { channels: 16, n_z: 16, vocab: 64, downsamples: 3 }
    }
}

impl AutoencoderConfig {
    pub fn stride(&self) -> usize {
        1 << self.downsamples
    }

    fn width_at(&self, level: usize) -> usize {
        if level >= 2 {
            2 * self.channels
        } else {
            self.channels
        }
    }

    pub fn to_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(&format!("{prefix}.channels"), self.channels);
        kv.set(&format!("{prefix}.n_z"), self.n_z);
        kv.set(&format!("{prefix}.vocab"), self.vocab);
        kv.set(&format!("{prefix}.downsamples"), self.downsamples);
    }

    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            channels: kv.get_or(&format!("{prefix}.channels"), d.channels)?,
            n_z: kv.get_or(&format!("{prefix}.n_z"), d.n_z)?,
            vocab: kv.get_or(&format!("{prefix}.vocab"), d.vocab)?,
            downsamples: kv.get_or(&format!("{prefix}.downsamples"), d.downsamples)?,
        })
    }
}

/// Anything that maps an image to a same-sized reconstruction.
pub trait Reconstructor {
    fn reconstruct(&self, img: &Image) -> Result<Image>;
    /// Image dims must be multiples of this.
    fn stride(&self) -> usize;
}

/// Strided conv encoder, VQ bottleneck and mirrored upsampling decoder.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub variant: Variant,
    pub params: ParameterSet,
    pub codebook: Codebook,
    enc: Vec<Conv>,
    enc_mid: Conv,
    enc_out: Conv,
    dec_in: Conv,
    dec_mid: Conv,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig, variant: Variant, rng: &mut impl Rng) -> Result<Self> {
        ensure!(cfg.channels >= 1 && cfg.n_z >= 1 && cfg.vocab >= 2, "invalid autoencoder config {cfg:?}");
        ensure!(cfg.downsamples >= 1, "need at least one downsampling stage");
        let mut ps = ParameterSet::new();
        let top = cfg.width_at(cfg.downsamples);
        let mut enc = vec![Conv::new(&mut ps, "enc.in", 3, cfg.channels, 3, 1, rng)];
        for i in 0..cfg.downsamples {
            enc.push(Conv::new(&mut ps, &format!("enc.down{i}"), cfg.width_at(i), cfg.width_at(i + 1), 3, 2, rng));
        }
        let enc_mid = Conv::new(&mut ps, "enc.mid", top, top, 3, 1, rng);
        let enc_out = Conv::new(&mut ps, "enc.out", top, cfg.n_z, 1, 1, rng);
        let dec_in = Conv::new(&mut ps, "dec.in", cfg.n_z, top, 3, 1, rng);
        let dec_mid = Conv::new(&mut ps, "dec.mid", top, top, 3, 1, rng);
        let dec_up = (0..cfg.downsamples)
            .rev()
            .map(|i| Conv::new(&mut ps, &format!("dec.up{i}"), cfg.width_at(i + 1), cfg.width_at(i), 3, 1, rng))
            .collect();
        let dec_out = Conv::new(&mut ps, "dec.out", cfg.channels, 3, 3, 1, rng);
        let codebook = Codebook::random(cfg.vocab, cfg.n_z, rng)?;
        Ok(Self { cfg, variant, params: ps, codebook, enc, enc_mid, enc_out, dec_in, dec_mid, dec_up, dec_out })
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let s = self.cfg.stride();
        ensure!(h >= s && w >= s && h % s == 0 && w % s == 0, "image {h}x{w} is not a positive multiple of the stride {s}");
        Ok(())
    }

    /// `[n, 3, H, W] -> [n, n_z, H/s, W/s]`, unit length across channels.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(x).dims4();
        self.check_dims(h, w)?;
        let mut cur = x;
        for c in &self.enc {
            let y = c.forward(g, p, cur, PadMode::Zero)?;
            cur = g.leaky_relu(y, LEAK);
        }
        let y = self.enc_mid.forward(g, p, cur, PadMode::Zero)?;
        let y = g.leaky_relu(y, LEAK);
        let cur = g.add(cur, y)?;
        let z = self.enc_out.forward(g, p, cur, PadMode::Zero)?;
        g.channel_norm(z, ZNORM_EPS)
    }

    /// `[n, n_z, h, w] -> [n, 3, h*s, w*s]`.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var, mode: PadMode) -> Result<Var> {
        let y = self.dec_in.forward(g, p, z, mode)?;
        let cur = g.leaky_relu(y, LEAK);
        let y = self.dec_mid.forward(g, p, cur, mode)?;
        let y = g.leaky_relu(y, LEAK);
        let mut cur = g.add(cur, y)?;
        for c in &self.dec_up {
            let up = g.upsample2(cur)?;
            let y = c.forward(g, p, up, mode)?;
            cur = g.leaky_relu(y, LEAK);
        }
        self.dec_out.forward(g, p, cur, mode)
    }

    /// Encoder rows `[n * h * w, n_z]` of a batch tensor, flattened.
    pub fn encode_batch_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &p, xv)?;
        let rows = g.nchw_to_rows(z)?;
        Ok(g.value(rows).data().to_vec())
    }

    /// Continuous encoder features `h x w x n_z` of one image.
    pub fn encode_features(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(img.to_tensor());
        let z = self.encode_graph(&mut g, &p, x)?;
        let rows = g.nchw_to_rows(z)?;
        let [_, _, h, w] = g.value(z).dims4();
        g.value(rows).clone().reshape(&[h, w, self.cfg.n_z])
    }

    /// Nearest-entry tokens of one image against `codebook`.
    pub fn encode_with(&self, img: &Image, codebook: &Codebook) -> Result<TokenGrid> {
        ensure!(codebook.dim() == self.cfg.n_z, "codebook dim {} differs from encoder n_z {}", codebook.dim(), self.cfg.n_z);
        let f = self.encode_features(img)?;
        let s = f.shape().to_vec();
        TokenGrid::new(s[0], s[1], codebook.len(), codebook.assign(f.data())?)
    }

    pub fn encode(&self, img: &Image) -> Result<TokenGrid> {
        self.encode_with(img, &self.codebook)
    }

    /// Decodes a token grid of any size; `mode` selects the decoder padding.
    pub fn decode(&self, grid: &TokenGrid, mode: PadMode) -> Result<Image> {
        let f = dequantize(grid, &self.codebook)?;
        let (h, w) = (grid.height(), grid.width());
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let rows = g.constant(f.reshape(&[h * w, self.cfg.n_z])?);
        let z = g.rows_to_nchw(rows, 1, h, w)?;
        let x = self.decode_graph(&mut g, &p, z, mode)?;
        Image::from_tensor(g.value(x), 0)
    }

    /// Decodes `grid` with `w_p` wrapped columns on each side and crops the
    /// image back, so both ends are decoded with their true neighbours.
    pub fn decode_wrapped(&self, grid: &TokenGrid, w_p: usize, mode: PadMode) -> Result<Image> {
        let ext = crate::transformer::extend_grid(grid, w_p)?;
        let img = self.decode(&ext, mode)?;
        let s = self.cfg.stride();
        img.crop(0, w_p * s, grid.height() * s, grid.width() * s)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, meta: &mut KeyValues) {
        let prefix = self.variant.tag();
        self.cfg.to_kv(meta, prefix);
        ck.insert_params(prefix, &self.params);
        ck.insert(&format!("{prefix}.codebook"), EntryData::F64(self.codebook.entries().clone()));
        ck.insert(&format!("{prefix}.codebook_usage"), EntryData::U32(self.codebook.usage().to_vec()));
    }

    pub fn from_checkpoint(ck: &Checkpoint, meta: &KeyValues, variant: Variant) -> Result<Self> {
        let prefix = variant.tag();
        let cfg = AutoencoderConfig::from_kv(meta, prefix)?;
        let mut m = Self::new(cfg, variant, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_params(prefix, &mut m.params)?;
        match ck.get(&format!("{prefix}.codebook")) {
            Some(EntryData::F64(t)) => m.codebook.set_entries(t.clone())?,
            _ => return Err(Error::Format { what: "checkpoint", detail: format!("missing {prefix}.codebook") }),
        }
        if let Some(EntryData::U32(u)) = ck.get(&format!("{prefix}.codebook_usage")) {
            m.codebook.set_usage(u.clone())?;
        }
        Ok(m)
    }
}

impl Reconstructor for Autoencoder {
    fn reconstruct(&self, img: &Image) -> Result<Image> {
        self.decode(&self.encode(img)?, PadMode::Zero)
    }

    fn stride(&self) -> usize {
        self.cfg.stride()
    }
}

/// Strided conv stack producing one logit per image patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParameterSet,
    convs: Vec<Conv>,
}

impl Discriminator {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let mut ps = ParameterSet::new();
        let convs = vec![
            Conv::new(&mut ps, "disc.c0", 3, channels, 3, 2, rng),
            Conv::new(&mut ps, "disc.c1", channels, 2 * channels, 3, 2, rng),
            Conv::new(&mut ps, "disc.c2", 2 * channels, 1, 3, 1, rng),
        ];
        Self { params: ps, convs }
    }

    /// Side length (pixels) of the input window seen by one logit.
    pub fn receptive_field(&self) -> usize {
        // 3x3 stride 2, 3x3 stride 2, 3x3 stride 1.
        3 + 2 * 2 + 2 * 4
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut cur = x;
        for (i, c) in self.convs.iter().enumerate() {
            cur = c.forward(g, p, cur, PadMode::CircularWidth)?;
            if i + 1 < self.convs.len() {
                cur = g.leaky_relu(cur, LEAK);
            }
        }
        Ok(cur)
    }
}

/// `mean softplus(-logits)` (target real) or `mean softplus(logits)`.
fn nonsat(g: &mut Graph, logits: Var, real: bool) -> Var {
    let x = if real { g.scale(logits, -1.0) } else { logits };
    let s = g.softplus(x);
    g.mean(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gan: f64,
    pub l1: f64,
    pub vq: f64,
    pub ws_perc: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gan: 0.1, l1: 1.0, vq: 1.0, ws_perc: 1.0, perc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gan, self.l1, self.vq, self.ws_perc, self.perc];
        ensure!(all.iter().all(|v| v.is_finite() && *v >= 0.0), "loss weights must be non-negative: {self:?}");
        Ok(())
    }
}

/// Feature-space term of the autoencoder loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualTerm {
    /// Latitude-weighted perceptual loss, weighted by `ws_perc`.
    WsPerceptual,
    /// Plain perceptual loss, weighted by `ws_perc`.
    Perceptual,
    /// Latitude-weighted L1 in pixel space, weighted by `ws_perc`.
    WsL1,
}

impl PerceptualTerm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ws-perceptual" => Ok(Self::WsPerceptual),
            "perceptual" => Ok(Self::Perceptual),
            "ws-l1" => Ok(Self::WsL1),
            _ => Err(Error::Config(format!("unknown perceptual term `{s}`"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::WsPerceptual => "ws-perceptual",
            Self::Perceptual => "perceptual",
            Self::WsL1 => "ws-l1",
        }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub gan: f64,
    pub l1: f64,
    pub vq: f64,
    pub perc: f64,
    pub lambda_gan: f64,
    pub total: f64,
}

struct LossVars {
    rows: Var,
    gan: Option<Var>,
    l1: Var,
    vq: Var,
    perc: Var,
    total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqganTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub perceptual: PerceptualTerm,
    /// Scale the GAN weight by the gradient-norm ratio at the last decoder
    /// layer.
    pub adaptive_gan: bool,
    /// Steps before the adversarial terms switch on.
    pub gan_start: usize,
    /// Re-seed unused codebook entries every this many steps (0 = never).
    pub reseed_every: usize,
    /// Initialise a trainable codebook from the first batch's encoder rows.
    pub data_init: bool,
    /// Random cyclic rotation of each training panorama.
    pub rotate: bool,
    pub divergence_factor: f64,
}

impl Default for VqganTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            seed: 0,
            adam: AdamConfig::with_lr(1e-3),
            weights: LossWeights::default(),
            perceptual: PerceptualTerm::WsPerceptual,
            adaptive_gan: false,
            gan_start: 0,
            reseed_every: 50,
            data_init: true,
            rotate: true,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VqganLog {
    pub terms: Vec<LossTerms>,
    pub disc_losses: Vec<f64>,
    pub reseeded: usize,
    pub skipped_steps: usize,
}

/// Random angular field of view used to mask training inputs.
pub fn random_fov(rng: &mut impl Rng) -> FovSpec {
    FovSpec::angular(rng.random_range(60.0..=180.0), rng.random_range(45.0..=120.0)).with_yaw(rng.random_range(-180.0..180.0))
}

/// Input and target of one autoencoder training example.
pub fn vqgan_example(variant: Variant, img: &Image, rotate: bool, rng: &mut impl Rng) -> Result<(Image, Image)> {
    let img = if rotate { rotate_horizontal(img, rng.random_range(0..img.width() as i64)) } else { img.clone() };
    match variant {
        Variant::Vqgan2 => Ok((img.clone(), img)),
        Variant::Vqgan1 => {
            let mask = make_fov_mask(&random_fov(rng), img.height(), img.width())?;
            let masked = apply_mask_gray(&img, &mask)?;
            Ok((masked.clone(), masked))
        }
    }
}

struct VqgenCtx<'a> {
    model: &'a Autoencoder,
    disc: &'a Discriminator,
    ext: &'a FeatureExtractor,
    weights: LossWeights,
    term: PerceptualTerm,
    gan_on: bool,
    adaptive: bool,
}

impl VqgenCtx<'_> {
    /// Builds the generator loss. The codebook table is a leaf when
    /// `train_codebook` is set.
    fn build(
        &self,
        g: &mut Graph,
        p: &Bound,
        table: Var,
        x_in: &Tensor,
        target: &Tensor,
    ) -> Result<(LossVars, Var, Rc<Vec<usize>>, f64)> {
        let m = self.model;
        let x = g.constant(x_in.clone());
        let t = g.constant(target.clone());
        let ze = m.encode_graph(g, p, x)?;
        let [n, _, h, w] = g.value(ze).dims4();
        let rows = g.nchw_to_rows(ze)?;
        let q = quantize_graph(g, rows, table, &m.codebook)?;
        let zq = g.rows_to_nchw(q.quantized, n, h, w)?;
        let xhat = m.decode_graph(g, p, zq, PadMode::Zero)?;

        let l1 = l1_graph(g, xhat, t, false)?;
        let perc = match self.term {
            PerceptualTerm::WsL1 => l1_graph(g, xhat, t, true)?,
            PerceptualTerm::WsPerceptual | PerceptualTerm::Perceptual => {
                let ep = self.ext.bind(g);
                let mode = if self.term == PerceptualTerm::WsPerceptual {
                    SpatialWeighting::Latitude
                } else {
                    SpatialWeighting::Uniform
                };
                perceptual_loss_graph(g, self.ext, &ep, xhat, t, mode)?
            }
        };
        let wl = self.weights;
        let a = g.scale(l1, wl.l1);
        let b = g.scale(q.loss, wl.vq);
        let c = g.scale(perc, wl.ws_perc);
        let rec = g.add(a, b)?;
        let rec = g.add(rec, c)?;

        let mut lambda = 0.0;
        let (gan, total) = if self.gan_on && wl.gan > 0.0 {
            let dp = self.disc.params.bind_frozen(g);
            let logits = self.disc.forward(g, &dp, xhat)?;
            let gan = nonsat(g, logits, true);
            lambda = wl.gan;
            if self.adaptive {
                let last = p.get(m.dec_out.w);
                let gr = g.backward(rec)?;
                let gg = g.backward(gan)?;
                let norm = |v: Option<&[f64]>| v.map_or(0.0, |s| s.iter().map(|x| x * x).sum::<f64>().sqrt());
                lambda = wl.gan * (norm(gr.get(last)) / (norm(gg.get(last)) + 1e-4)).clamp(0.0, 1e4);
            }
            let scaled = g.scale(gan, lambda);
            (Some(gan), g.add(rec, scaled)?)
        } else {
            (None, rec)
        };
        Ok((LossVars { rows, gan, l1, vq: q.loss, perc, total }, xhat, q.indices, lambda))
    }
}

fn loss_terms(g: &Graph, v: &LossVars, lambda: f64) -> LossTerms {
    LossTerms {
        gan: v.gan.map_or(0.0, |x| g.value(x).item()),
        l1: g.value(v.l1).item(),
        vq: g.value(v.vq).item(),
        perc: g.value(v.perc).item(),
        lambda_gan: lambda,
        total: g.value(v.total).item(),
    }
}

fn pick_batch<'a>(data: &'a [Image], batch: usize, rng: &mut impl Rng) -> Vec<&'a Image> {
    (0..batch).map(|_| &data[rng.random_range(0..data.len())]).collect()
}

fn discriminator_step(disc: &mut Discriminator, real: &Tensor, fake: &Tensor, adam: &AdamConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = disc.params.bind(&mut g);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let lr = disc.forward(&mut g, &p, r)?;
    let lf = disc.forward(&mut g, &p, f)?;
    let a = nonsat(&mut g, lr, true);
    let b = nonsat(&mut g, lf, false);
    let loss = g.add(a, b)?;
    let v = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let gv = p.collect(&mut grads, &disc.params);
    disc.params.adam_step(&gv, adam)?;
    Ok(v)
}

/// Trains an autoencoder with alternating discriminator updates.
///
/// `Vqgan2` also trains its codebook; `Vqgan1` keeps the codebook fixed
/// (it is expected to hold the trained `Vqgan2` codebook).
pub fn train_vqgan(
    model: &mut Autoencoder,
    disc: &mut Discriminator,
    ext: &FeatureExtractor,
    data: &[Image],
    cfg: &VqganTrainConfig,
) -> Result<VqganLog> {
    ensure!(!data.is_empty(), "autoencoder dataset is empty");
    ensure!(cfg.batch >= 1, "batch size must be positive");
    cfg.weights.validate()?;
    for img in data {
        model.check_dims(img.height(), img.width())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_cb = model.variant == Variant::Vqgan2;
    let mut cb_ps = ParameterSet::new();
    let cb_id = cb_ps.add("codebook", model.codebook.entries().clone());
    let mut log = VqganLog::default();
    let mut first = None;
    for step in 0..cfg.steps {
        let batch = pick_batch(data, cfg.batch, &mut rng);
        let mut ins = Vec::with_capacity(batch.len());
        let mut tgts = Vec::with_capacity(batch.len());
        for img in batch {
            let (i, t) = vqgan_example(model.variant, img, cfg.rotate, &mut rng)?;
            ins.push(i);
            tgts.push(t);
        }
        let x_in = Image::batch_tensor(&ins.iter().collect::<Vec<_>>())?;
        let target = Image::batch_tensor(&tgts.iter().collect::<Vec<_>>())?;
        let gan_on = step >= cfg.gan_start;
        if step == 0 && train_cb && cfg.data_init {
            let f = model.encode_batch_rows(&x_in)?;
            model.codebook.init_from_rows(&f, &mut rng)?;
            *cb_ps.get_mut(cb_id) = model.codebook.entries().clone();
        }

        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let table = if train_cb { g.leaf(cb_ps.get(cb_id).clone()) } else { g.constant(cb_ps.get(cb_id).clone()) };
        let ctx = VqgenCtx { model, disc, ext, weights: cfg.weights, term: cfg.perceptual, gan_on, adaptive: cfg.adaptive_gan };
        let (vars, xhat, indices, lambda) = ctx.build(&mut g, &p, table, &x_in, &target)?;
        let terms = loss_terms(&g, &vars, lambda);
        let initial = *first.get_or_insert(terms.total);
        if !terms.total.is_finite() || terms.total > initial * cfg.divergence_factor {
            return Err(Error::Divergence { step, loss: terms.total, limit: initial * cfg.divergence_factor });
        }
        let mut grads = g.backward(vars.total)?;
        let gv = p.collect(&mut grads, &model.params);
        if !model.params.adam_step(&gv, &cfg.adam)?.skipped.is_empty() {
            log.skipped_steps += 1;
        }
        if train_cb {
            let gcb = grads.take(table).unwrap_or_else(|| vec![0.0; model.codebook.entries().numel()]);
            cb_ps.adam_step(&[gcb], &cfg.adam)?;
            model.codebook.set_entries(cb_ps.get(cb_id).clone())?;
            model.codebook.record_usage(&indices);
            if cfg.reseed_every > 0 && (step + 1) % cfg.reseed_every == 0 {
                let rows = g.value(vars.rows).data().to_vec();
                log.reseeded += model.codebook.reseed_dead(&rows, &mut rng);
                *cb_ps.get_mut(cb_id) = model.codebook.entries().clone();
            }
        }
        let fake = g.value(xhat).clone();
        drop(g);
        if gan_on && cfg.weights.gan > 0.0 {
            log.disc_losses.push(discriminator_step(disc, &target, &fake, &cfg.adam)?);
        }
        log.terms.push(terms);
    }
    Ok(log)
}

/// Loss terms for one batch without updating anything.
pub fn vqgan_loss_terms(
    model: &Autoencoder,
    disc: &Discriminator,
    ext: &FeatureExtractor,
    x_in: &Tensor,
    target: &Tensor,
    weights: LossWeights,
    term: PerceptualTerm,
) -> Result<LossTerms> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let table = g.constant(model.codebook.entries().clone());
    let ctx = VqgenCtx { model, disc, ext, weights, term, gan_on: true, adaptive: false };
    let (vars, _, _, lambda) = ctx.build(&mut g, &p, table, x_in, target)?;
    Ok(loss_terms(&g, &vars, lambda))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjustConfig {
    pub channels: usize,
    /// Feed the known-region mask as an extra input channel.
    pub use_mask: bool,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        Self { channels: 16, use_mask: true }
    }
}

/// U-net over `[completed, original, mask]` predicting a residual on the
/// completed image.
#[derive(Clone, Debug)]
pub struct AdjustModel {
    pub cfg: AdjustConfig,
    pub params: ParameterSet,
    e1: Conv,
    e2: Conv,
    e3: Conv,
    d2: Conv,
    d1: Conv,
    out: Conv,
}

pub const ADJUST_STRIDE: usize = 4;

impl AdjustModel {
    pub fn new(cfg: AdjustConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let cin = if cfg.use_mask { 7 } else { 6 };
        let mut ps = ParameterSet::new();
        let e1 = Conv::new(&mut ps, "adj.e1", cin, c, 3, 1, rng);
        let e2 = Conv::new(&mut ps, "adj.e2", c, 2 * c, 3, 2, rng);
        let e3 = Conv::new(&mut ps, "adj.e3", 2 * c, 2 * c, 3, 2, rng);
        let d2 = Conv::new(&mut ps, "adj.d2", 4 * c, c, 3, 1, rng);
        let d1 = Conv::new(&mut ps, "adj.d1", 2 * c, c, 3, 1, rng);
        let out = Conv::new(&mut ps, "adj.out", c, 3, 3, 1, rng);
        Self { cfg, params: ps, e1, e2, e3, d2, d1, out }
    }

    /// All inputs `[n, *, H, W]` with `H, W` multiples of [`ADJUST_STRIDE`].
    pub fn forward(&self, g: &mut Graph, p: &Bound, completed: Var, original: Var, mask: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(completed).dims4();
        ensure!(h % ADJUST_STRIDE == 0 && w % ADJUST_STRIDE == 0, "adjust input {h}x{w} not a multiple of {ADJUST_STRIDE}");
        let x = if self.cfg.use_mask {
            g.concat_channels(&[completed, original, mask])?
        } else {
            g.concat_channels(&[completed, original])?
        };
        let m = PadMode::CircularWidth;
        let y = self.e1.forward(g, p, x, m)?;
        let s1 = g.leaky_relu(y, LEAK);
        let y = self.e2.forward(g, p, s1, m)?;
        let s2 = g.leaky_relu(y, LEAK);
        let y = self.e3.forward(g, p, s2, m)?;
        let s3 = g.leaky_relu(y, LEAK);
        let u = g.upsample2(s3)?;
        let u = g.concat_channels(&[u, s2])?;
        let y = self.d2.forward(g, p, u, m)?;
        let y = g.leaky_relu(y, LEAK);
        let u = g.upsample2(y)?;
        let u = g.concat_channels(&[u, s1])?;
        let y = self.d1.forward(g, p, u, m)?;
        let y = g.leaky_relu(y, LEAK);
        let delta = self.out.forward(g, p, y, m)?;
        g.add(completed, delta)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, meta: &mut KeyValues) {
        meta.set("adjust.channels", self.cfg.channels);
        meta.set("adjust.use_mask", self.cfg.use_mask);
        ck.insert_params("adjust", &self.params);
    }

    pub fn from_checkpoint(ck: &Checkpoint, meta: &KeyValues) -> Result<Self> {
        let d = AdjustConfig::default();
        let cfg = AdjustConfig {
            channels: meta.get_or("adjust.channels", d.channels)?,
            use_mask: meta.get_or("adjust.use_mask", d.use_mask)?,
        };
        let mut m = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_params("adjust", &mut m.params)?;
        Ok(m)
    }
}

fn mask_tensor(masks: &[&FovMask]) -> Result<Tensor> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        ensure!((m.height(), m.width()) == (h, w), "masks differ in size");
        data.extend(m.known().iter().map(|&k| if k { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[masks.len(), 1, h, w], data)
}

/// Mask channel zero-padded on the bottom/right to `ph x pw`.
fn padded_mask_tensor(mask: &FovMask, ph: usize, pw: usize) -> Result<Tensor> {
    let (h, w) = (mask.height(), mask.width());
    let data = (0..ph * pw)
        .map(|p| {
            let (y, x) = (p / pw, p % pw);
            if y < h && x < w && mask.is_known(y, x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[1, 1, ph, pw], data)
}

/// Bottom/right reflect padding up to the next multiple of `m`.
fn pad_reflect(img: &Image, m: usize) -> Image {
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let refl = |i: usize, n: usize| if i < n { i } else { (2 * n).saturating_sub(i + 2).min(n - 1) };
    Image::from_fn(ph, pw, |y, x| img.pixel(refl(y, h), refl(x, w)))
}

/// Runs the adjustment network and copies the known region back from
/// `original`. Sizes that are not multiples of the network stride are
/// reflect-padded on the bottom/right and cropped afterwards.
pub fn adjust(model: &AdjustModel, completed: &Image, original: &Image, mask: &FovMask) -> Result<Image> {
    ensure!(completed.dims() == original.dims(), "completed {:?} and original {:?} differ", completed.dims(), original.dims());
    ensure!(completed.dims() == (mask.height(), mask.width()), "mask dims differ from the image");
    let (h, w) = completed.dims();
    let cp = pad_reflect(completed, ADJUST_STRIDE);
    let op = pad_reflect(original, ADJUST_STRIDE);
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let c = g.constant(cp.to_tensor());
    let o = g.constant(op.to_tensor());
    let mv = g.constant(padded_mask_tensor(mask, cp.height(), cp.width())?);
    let y = model.forward(&mut g, &p, c, o, mv)?;
    let out = Image::from_tensor(g.value(y), 0)?;
    let out = if out.dims() != (h, w) { out.crop(0, 0, h, w)? } else { out };
    composite_known(&out, original, mask)
}

/// Synthesis settings for adjustment training pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairConfig {
    pub jitter: bool,
    /// Downscale factors drawn uniformly.
    pub scales: Vec<usize>,
    /// Hint rectangle area fraction range; `None` disables the hint.
    pub hint: Option<(f64, f64)>,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { jitter: true, scales: vec![1, 2], hint: Some((0.25, 0.5)) }
    }
}

/// One adjustment training example.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjustPair {
    pub completed: Image,
    pub original: Image,
    pub mask: FovMask,
    pub target: Image,
}

/// Per-channel gain in `[0.8, 1.2]` plus a brightness offset in `[-0.1, 0.1]`.
pub fn color_jitter(img: &Image, rng: &mut impl Rng) -> Image {
    let gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..=1.2));
    let off = rng.random_range(-0.1..=0.1);
    Image::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        std::array::from_fn(|c| p[c] * gain[c] + off)
    })
}

/// Random `h x w` crop of a panorama (columns wrap).
pub fn random_crop(img: &Image, h: usize, w: usize, rng: &mut impl Rng) -> Result<Image> {
    ensure!(h <= img.height() && w <= img.width(), "crop {h}x{w} larger than image {:?}", img.dims());
    let y0 = rng.random_range(0..=img.height() - h);
    let x0 = rng.random_range(0..img.width());
    img.crop(y0, x0, h, w)
}

/// Builds `(input, target)` from a ground-truth crop: optional colour
/// jitter, downscale, reconstruction, bicubic upscale, then a ground-truth
/// hint rectangle composited back in.
pub fn make_adjust_training_pair(gt: &Image, recon: &dyn Reconstructor, cfg: &PairConfig, seed: u64) -> Result<AdjustPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = gt.dims();
    ensure!(!cfg.scales.is_empty() && cfg.scales.iter().all(|&s| s >= 1), "scales must be positive");
    let scale = cfg.scales[rng.random_range(0..cfg.scales.len())];
    let s = recon.stride() * scale;
    ensure!(h >= s && w >= s && h % s == 0 && w % s == 0, "crop {h}x{w} smaller than or not a multiple of the network stride {s}");
    let src = if cfg.jitter { color_jitter(gt, &mut rng) } else { gt.clone() };
    let small = if scale > 1 { resize_bicubic(&src, h / scale, w / scale, false)? } else { src };
    let rec = recon.reconstruct(&small)?;
    let up = if scale > 1 { resize_bicubic(&rec, h, w, false)? } else { rec };
    let mask = match cfg.hint {
        Some((lo, hi)) => {
            let area = rng.random_range(lo..=hi);
            let hf = rng.random_range(area..=1.0);
            let rows = ((hf * h as f64).round() as usize).clamp(1, h);
            let cols = (((area / hf) * w as f64).round() as usize).clamp(1, w);
            let r0 = rng.random_range(0..=h - rows);
            let c0 = rng.random_range(0..=w - cols);
            FovMask::from_rect(h, w, r0, rows, c0, cols, FovSpec::full())?
        }
        None => FovMask::empty(h, w),
    };
    let completed = composite_known(&up, gt, &mask)?;
    let original = apply_mask_gray(gt, &mask)?;
    Ok(AdjustPair { completed, original, mask, target: gt.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjustTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Only `gan`, `l1` and `perc` are used.
    pub weights: LossWeights,
    pub divergence_factor: f64,
}

impl Default for AdjustTrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch: 4, seed: 0, adam: AdamConfig::with_lr(1e-3), weights: LossWeights::default(), divergence_factor: 10.0 }
    }
}

fn adjust_loss(
    model: &AdjustModel,
    disc: &Discriminator,
    ext: &FeatureExtractor,
    g: &mut Graph,
    p: &Bound,
    pairs: &[&AdjustPair],
    weights: &LossWeights,
) -> Result<(Var, Var, Tensor)> {
    let c = g.constant(Image::batch_tensor(&pairs.iter().map(|q| &q.completed).collect::<Vec<_>>())?);
    let o = g.constant(Image::batch_tensor(&pairs.iter().map(|q| &q.original).collect::<Vec<_>>())?);
    let m = g.constant(mask_tensor(&pairs.iter().map(|q| &q.mask).collect::<Vec<_>>())?);
    let target = Image::batch_tensor(&pairs.iter().map(|q| &q.target).collect::<Vec<_>>())?;
    let t = g.constant(target.clone());
    let y = model.forward(g, p, c, o, m)?;
    let l1 = l1_graph(g, y, t, false)?;
    let ep = ext.bind(g);
    let perc = perceptual_loss_graph(g, ext, &ep, y, t, SpatialWeighting::Uniform)?;
    let a = g.scale(l1, weights.l1);
    let b = g.scale(perc, weights.perc);
    let mut total = g.add(a, b)?;
    if weights.gan > 0.0 {
        let dp = disc.params.bind_frozen(g);
        let logits = disc.forward(g, &dp, y)?;
        let gan = nonsat(g, logits, true);
        let s = g.scale(gan, weights.gan);
        total = g.add(total, s)?;
    }
    Ok((total, y, target))
}

/// Trains the adjustment network on precomputed pairs with L1, plain
/// perceptual and (optionally) adversarial terms.
pub fn train_adjustment(
    model: &mut AdjustModel,
    disc: &mut Discriminator,
    ext: &FeatureExtractor,
    pairs: &[AdjustPair],
    cfg: &AdjustTrainConfig,
) -> Result<Vec<f64>> {
    ensure!(!pairs.is_empty(), "adjustment dataset is empty");
    cfg.weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut first = None;
    for step in 0..cfg.steps {
        let batch: Vec<&AdjustPair> = (0..cfg.batch).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let (total, y, target) = adjust_loss(model, disc, ext, &mut g, &p, &batch, &cfg.weights)?;
        let lv = g.value(total).item();
        let initial = *first.get_or_insert(lv);
        if !lv.is_finite() || lv > initial * cfg.divergence_factor {
            return Err(Error::Divergence { step, loss: lv, limit: initial * cfg.divergence_factor });
        }
        let mut grads = g.backward(total)?;
        let gv = p.collect(&mut grads, &model.params);
        model.params.adam_step(&gv, &cfg.adam)?;
        let fake = g.value(y).clone();
        drop(g);
        if cfg.weights.gan > 0.0 {
            discriminator_step(disc, &target, &fake, &cfg.adam)?;
        }
        losses.push(lv);
    }
    Ok(losses)
}

/// Gradient of a loss with respect to every parameter of a set, for
/// dead-parameter checks.
pub fn param_grads(ps: &ParameterSet, f: impl Fn(&mut Graph, &Bound) -> Result<Var>) -> Result<Vec<(String, f64)>> {
    let mut g = Graph::new();
    let p = ps.bind(&mut g);
    let loss = f(&mut g, &p)?;
    let mut grads = g.backward(loss)?;
    let gv = p.collect(&mut grads, ps);
    Ok(ps.iter().zip(gv).map(|((n, _), v)| (n.to_string(), v.iter().map(|x| x.abs()).sum())).collect())
}

pub fn param_id(ps: &ParameterSet, name: &str) -> Result<ParamId> {
    ps.id(name).ok_or_else(|| Error::contract(format!("no parameter named {name}")))
}
