//! Loss family and evaluation metrics: perceptual and latitude-weighted
//! perceptual losses, WS-L1, Fréchet distance, diversity and seam
//! discontinuity.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::erp::{erp_to_cubemap, Image, LatitudeWeights};
use crate::error::{ensure, Error, Result};
use crate::kernels::PadMode;
use crate::nn::Conv;
use crate::params::{Bound, ParameterSet};
use crate::tensor::Tensor;

pub const FEATURE_SEED: u64 = 0x5EED_F00D;
pub const CHANNEL_NORM_EPS: f64 = 1e-10;

/// Multi-scale feature maps plus their per-channel weights `w_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    layers: Vec<Tensor>,
    weights: Vec<Vec<f64>>,
}

impl FeaturePyramid {
    /// `layers[l]` is `[n, C_l, H_l, W_l]`; `weights[l]` has `C_l` entries.
    pub fn new(layers: Vec<Tensor>, weights: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(!layers.is_empty() && layers.len() == weights.len(), "pyramid needs one weight vector per layer");
        for (t, w) in layers.iter().zip(&weights) {
            ensure!(t.shape().len() == 4 && t.dims4()[1] == w.len(), "layer {:?} vs {} weights", t.shape(), w.len());
            ensure!(w.iter().all(|&x| x >= 0.0), "channel weights must be non-negative");
        }
        Ok(Self { layers, weights })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Frozen, seed-pinned convolutional stack standing in for a pretrained
/// perceptual network. Layer 0 keeps full resolution, later layers halve
/// it. Activations are unit-normalised across channels.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParameterSet,
    convs: Vec<Conv>,
    channels: Vec<usize>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(FEATURE_SEED, &[8, 16, 32])
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (l, &c) in channels.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            convs.push(Conv::new(&mut params, &format!("feat{l}"), cin, c, 3, stride, &mut rng));
            cin = c;
        }
        Self { params, convs, channels: channels.to_vec() }
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// `w_l = 1 / sqrt(C_l)` for every channel.
    pub fn channel_weights(&self) -> Vec<Vec<f64>> {
        self.channels.iter().map(|&c| vec![1.0 / (c as f64).sqrt(); c]).collect()
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.num_layers() - 1);
        ensure!(h % f == 0 && w % f == 0, "image {h}x{w} not divisible by {f}");
        Ok(())
    }

    /// Normalised feature maps for `x: [n, 3, H, W]`. Parameters are bound
    /// as constants so gradients flow only to `x`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = g.value(x).dims4();
        self.check_dims(h, w)?;
        let mut out = Vec::with_capacity(self.convs.len());
        let mut cur = x;
        for conv in &self.convs {
            let y = conv.forward(g, p, cur, PadMode::CircularWidth)?;
            cur = g.leaky_relu(y, 0.2);
            out.push(g.channel_norm(cur, CHANNEL_NORM_EPS)?);
        }
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind_frozen(g)
    }

    pub fn extract(&self, img: &Image) -> Result<FeaturePyramid> {
        self.extract_tensor(&img.to_tensor())
    }

    pub fn extract_tensor(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let feats = self.forward(&mut g, &p, xv)?;
        FeaturePyramid::new(feats.iter().map(|&f| g.value(f).clone()).collect(), self.channel_weights())
    }

    /// Global average of the deepest layer, one vector per image.
    pub fn pooled(&self, img: &Image) -> Result<Vec<f64>> {
        let pyr = self.extract(img)?;
        let last = pyr.layers.last().unwrap();
        let [_, c, h, w] = last.dims4();
        Ok((0..c)
            .map(|ch| last.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect())
    }
}

/// How spatial positions of a feature layer are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialWeighting {
    /// `1 / (H_l W_l)` for every position.
    Uniform,
    /// Latitude weights normalised by their sum over all positions.
    Latitude,
    /// The latitude code path with every row weight forced to 1.
    LatitudeForcedUniform,
}

fn layer_weight_buffer(shape: [usize; 4], channel_w: &[f64], mode: SpatialWeighting) -> Result<Vec<f64>> {
    let [n, c, h, w] = shape;
    let rows: Vec<f64> = match mode {
        SpatialWeighting::Uniform => vec![1.0 / (h * w) as f64; h],
        SpatialWeighting::Latitude | SpatialWeighting::LatitudeForcedUniform => {
            let lw = if mode == SpatialWeighting::Latitude {
                LatitudeWeights::new(h)?.values().to_vec()
            } else {
                vec![1.0; h]
            };
            // Row weights broadcast along u, so the normaliser is W * sum_v w'(v).
            let norm: f64 = lw.iter().sum::<f64>() * w as f64;
            lw.iter().map(|v| v / norm).collect()
        }
    };
    let mut buf = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for &cw in channel_w {
            for &r in &rows {
                for _ in 0..w {
                    buf.push(cw * cw * r / n as f64);
                }
            }
        }
    }
    Ok(buf)
}

/// `sum_l sum_uv weight(l, v) * ||w_l . (a_uv - b_uv)||^2`, averaged over
/// the batch dimension.
pub fn pyramid_distance(g: &mut Graph, fa: &[Var], fb: &[Var], channel_w: &[Vec<f64>], mode: SpatialWeighting) -> Result<Var> {
    ensure!(fa.len() == fb.len() && fa.len() == channel_w.len(), "pyramid depth mismatch");
    let mut total: Option<Var> = None;
    for l in 0..fa.len() {
        let shape = g.value(fa[l]).dims4();
        if g.value(fb[l]).dims4() != shape {
            return Err(Error::shape("pyramid_distance", format!("layer {l}: {:?} vs {:?}", shape, g.value(fb[l]).dims4())));
        }
        let d = g.sub(fa[l], fb[l])?;
        let sq = g.square(d);
        let wbuf = layer_weight_buffer(shape, &channel_w[l], mode)?;
        let weighted = g.mul_const(sq, Rc::new(wbuf))?;
        let s = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

fn pyramid_loss_values(a: &FeaturePyramid, b: &FeaturePyramid, mode: SpatialWeighting) -> Result<f64> {
    ensure!(a.weights == b.weights, "pyramids use different channel weights");
    let mut g = Graph::new();
    let fa: Vec<Var> = a.layers.iter().map(|t| g.constant(t.clone())).collect();
    let fb: Vec<Var> = b.layers.iter().map(|t| g.constant(t.clone())).collect();
    let v = pyramid_distance(&mut g, &fa, &fb, &a.weights, mode)?;
    Ok(g.value(v).item())
}

pub fn perceptual_loss_pyramids(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<f64> {
    pyramid_loss_values(a, b, SpatialWeighting::Uniform)
}

pub fn ws_perceptual_loss_pyramids(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<f64> {
    pyramid_loss_values(a, b, SpatialWeighting::Latitude)
}

pub fn weighted_loss_pyramids(a: &FeaturePyramid, b: &FeaturePyramid, mode: SpatialWeighting) -> Result<f64> {
    pyramid_loss_values(a, b, mode)
}

fn image_pair_check(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Unweighted perceptual loss between two images.
pub fn perceptual_loss(ext: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    image_pair_check("perceptual_loss", a, b)?;
    perceptual_loss_pyramids(&ext.extract(a)?, &ext.extract(b)?)
}

/// Perceptual loss with latitude-weighted spatial terms.
pub fn ws_perceptual_loss(ext: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    image_pair_check("ws_perceptual_loss", a, b)?;
    ws_perceptual_loss_pyramids(&ext.extract(a)?, &ext.extract(b)?)
}

/// Graph form used inside training losses. `a` and `b` are `[n, 3, H, W]`.
pub fn perceptual_loss_graph(g: &mut Graph, ext: &FeatureExtractor, p: &Bound, a: Var, b: Var, mode: SpatialWeighting) -> Result<Var> {
    let fa = ext.forward(g, p, a)?;
    let fb = ext.forward(g, p, b)?;
    pyramid_distance(g, &fa, &fb, &ext.channel_weights(), mode)
}

fn l1_weight_buffer(shape: [usize; 4], latitude: bool) -> Result<Vec<f64>> {
    let [n, c, h, w] = shape;
    let lw = if latitude {
        LatitudeWeights::new(h)?.values().to_vec()
    } else {
        vec![1.0; h]
    };
    let norm = lw.iter().sum::<f64>() * (w * c * n) as f64;
    let mut buf = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c {
        for &r in &lw {
            for _ in 0..w {
                buf.push(r / norm);
            }
        }
    }
    Ok(buf)
}

/// Mean absolute error over `[n, c, H, W]`, optionally latitude-weighted.
pub fn l1_graph(g: &mut Graph, a: Var, b: Var, latitude: bool) -> Result<Var> {
    let shape = g.value(a).dims4();
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    let buf = l1_weight_buffer(shape, latitude)?;
    let weighted = g.mul_const(ad, Rc::new(buf))?;
    Ok(g.sum(weighted))
}

/// Latitude-weight-normalised mean absolute pixel error.
pub fn ws_l1_loss(a: &Image, b: &Image) -> Result<f64> {
    image_pair_check("ws_l1_loss", a, b)?;
    let mut g = Graph::new();
    let av = g.constant(a.to_tensor());
    let bv = g.constant(b.to_tensor());
    let v = l1_graph(&mut g, av, bv, true)?;
    Ok(g.value(v).item())
}

pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    image_pair_check("l1_loss", a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

/// Gaussian fit of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance (unbiased).
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Accumulates samples in the given order.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        ensure!(samples.len() >= 2, "feature stats need at least 2 samples, got {}", samples.len());
        let d = samples[0].len();
        ensure!(d > 0 && samples.iter().all(|s| s.len() == d), "inconsistent feature dimension");
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n - 1.0);
        Ok(Self { mean, cov, count: samples.len() })
    }

    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        ensure!(cov.len() == d * d, "covariance must be {d}x{d}");
        ensure!(count >= 2, "feature stats need at least 2 samples");
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub const PSD_TOLERANCE: f64 = 1e-8;

fn sym_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::contract(format!("{what} is not positive semi-definite (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of `(S1 S2)^(1/2)` is computed as the trace of the symmetric
/// `(sqrt(S1) S2 sqrt(S1))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    ensure!(s1.dim() == s2.dim(), "feature dims differ: {} vs {}", s1.dim(), s2.dim());
    ensure!(s1.count >= 2 && s2.count >= 2, "need at least 2 samples per set");
    let d = s1.dim();
    let a = DMatrix::from_row_slice(d, d, &s1.cov);
    let b = DMatrix::from_row_slice(d, d, &s2.cov);
    let sa = sym_sqrt(&((&a + a.transpose()) * 0.5), "first covariance")?;
    let bs = (&b + b.transpose()) * 0.5;
    let inner = &sa * &bs * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOLERANCE {
            return Err(Error::contract(format!("covariance product is not PSD (eigenvalue {v})")));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let mean_term: f64 = s1.mean.iter().zip(&s2.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr = a.trace() + b.trace() - 2.0 * tr_sqrt;
    Ok(mean_term + tr)
}

/// Mean perceptual loss over unordered sample pairs.
pub fn diversity_score(ext: &FeatureExtractor, samples: &[Image]) -> Result<f64> {
    ensure!(samples.len() >= 2, "diversity needs at least 2 samples, got {}", samples.len());
    let pyrs = samples.iter().map(|s| ext.extract(s)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..pyrs.len() {
        for j in i + 1..pyrs.len() {
            total += perceptual_loss_pyramids(&pyrs[i], &pyrs[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean |col W-1 - col 0| minus the mean absolute difference over all
/// interior adjacent column pairs. Zero means the wrap boundary looks like
/// any other column boundary.
pub fn seam_discontinuity(img: &Image) -> f64 {
    let (h, w) = img.dims();
    if w < 2 {
        return 0.0;
    }
    let col_diff = |a: usize, b: usize| -> f64 {
        let mut s = 0.0;
        for y in 0..h {
            let (pa, pb) = (img.pixel(y, a), img.pixel(y, b));
            s += (0..3).map(|c| (pa[c] - pb[c]).abs()).sum::<f64>();
        }
        s / (3 * h) as f64
    };
    let seam = col_diff(w - 1, 0);
    if w == 2 {
        return seam - col_diff(0, 1);
    }
    let interior = (0..w - 1).map(|x| col_diff(x, x + 1)).sum::<f64>() / (w - 1) as f64;
    seam - interior
}

/// Variance of the 4-neighbour Laplacian over interior pixels, averaged
/// across channels. Lower means blurrier.
pub fn laplacian_variance(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let mut vals = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (c, n, s, e, wv) = (img.pixel(y, x), img.pixel(y - 1, x), img.pixel(y + 1, x), img.pixel(y, x + 1), img.pixel(y, x - 1));
            for ch in 0..3 {
                vals.push(n[ch] + s[ch] + e[ch] + wv[ch] - 4.0 * c[ch]);
            }
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

/// Pooled deepest-layer features of the four lateral cubemap faces.
pub fn lateral_face_features(ext: &FeatureExtractor, img: &Image, face_size: usize) -> Result<Vec<Vec<f64>>> {
    let faces = erp_to_cubemap(img, face_size)?;
    faces.drop_top_bottom().iter().map(|f| ext.pooled(f)).collect()
}

/// Fréchet distance between lateral-face feature statistics of two sets.
pub fn cubemap_frechet(ext: &FeatureExtractor, real: &[Image], fake: &[Image], face_size: usize) -> Result<f64> {
    let collect = |set: &[Image]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for img in set {
            out.extend(lateral_face_features(ext, img, face_size)?);
        }
        Ok(out)
    };
    let (a, b) = (collect(real)?, collect(fake)?);
    frechet_distance(&FeatureStats::from_samples(&a)?, &FeatureStats::from_samples(&b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erp::rotate_horizontal;

    fn pano(h: usize, phase: f64) -> Image {
        Image::from_fn(h, 2 * h, |v, u| {
            let x = u as f64 / (2 * h) as f64 * std::f64::consts::TAU;
            let y = v as f64 / h as f64;
            [0.5 + 0.3 * (x + phase).sin(), y, 0.5 + 0.2 * (3.0 * x).cos() * y]
        })
    }

    fn identity_pyramid(img: &Image) -> FeaturePyramid {
        FeaturePyramid::new(vec![img.to_tensor()], vec![vec![1.0; 3]]).unwrap()
    }

    #[test]
    fn extractor_layer_dims() {
        let ext = FeatureExtractor::default();
        let pyr = ext.extract(&pano(64, 0.0)).unwrap();
        let dims: Vec<_> = pyr.layers().iter().map(|t| (t.dims4()[2], t.dims4()[3])).collect();
        assert_eq!(dims, vec![(64, 128), (32, 64), (16, 32)]);
        assert!(ext.extract(&Image::filled(6, 12, [0.0; 3])).is_err());
    }

    #[test]
    fn extractor_is_deterministic() {
        let (a, b) = (FeatureExtractor::default(), FeatureExtractor::default());
        let img = pano(16, 0.3);
        assert_eq!(a.extract(&img).unwrap(), b.extract(&img).unwrap());
    }

    #[test]
    fn perceptual_basic_properties() {
        let ext = FeatureExtractor::default();
        let (a, b) = (pano(16, 0.0), pano(16, 0.7));
        assert_eq!(perceptual_loss(&ext, &a, &a).unwrap(), 0.0);
        assert_eq!(ws_perceptual_loss(&ext, &a, &a).unwrap(), 0.0);
        let ab = perceptual_loss(&ext, &a, &b).unwrap();
        assert!(ab > 0.0);
        assert!((ab - perceptual_loss(&ext, &b, &a).unwrap()).abs() < 1e-15);
        assert!(perceptual_loss(&ext, &a, &pano(8, 0.0)).is_err());
    }

    #[test]
    fn identity_extractor_uniform_difference() {
        let d = 0.1;
        let a = Image::filled(4, 8, [0.2; 3]);
        let b = Image::filled(4, 8, [0.2 + d; 3]);
        let l = perceptual_loss_pyramids(&identity_pyramid(&a), &identity_pyramid(&b)).unwrap();
        assert!((l - 3.0 * d * d).abs() < 1e-12);
        // Uniform differences are unaffected by spatial weighting.
        let ws = ws_perceptual_loss_pyramids(&identity_pyramid(&a), &identity_pyramid(&b)).unwrap();
        assert!((ws - 3.0 * d * d).abs() < 1e-12);
    }

    #[test]
    fn single_row_layers_make_both_losses_equal() {
        let a = Image::from_fn(1, 8, |_, u| [u as f64 / 8.0, 0.1, 0.9]);
        let b = Image::from_fn(1, 8, |_, u| [0.5, (u % 3) as f64 / 3.0, 0.2]);
        let (pa, pb) = (identity_pyramid(&a), identity_pyramid(&b));
        assert_eq!(perceptual_loss_pyramids(&pa, &pb).unwrap(), ws_perceptual_loss_pyramids(&pa, &pb).unwrap());
    }

    #[test]
    fn forced_uniform_rows_match_plain_path() {
        let ext = FeatureExtractor::default();
        let (pa, pb) = (ext.extract(&pano(16, 0.0)).unwrap(), ext.extract(&pano(16, 1.1)).unwrap());
        let plain = weighted_loss_pyramids(&pa, &pb, SpatialWeighting::Uniform).unwrap();
        let forced = weighted_loss_pyramids(&pa, &pb, SpatialWeighting::LatitudeForcedUniform).unwrap();
        assert!((plain - forced).abs() < 1e-12 * plain.max(1.0));
    }

    #[test]
    fn polar_error_weighs_less() {
        let ext = FeatureExtractor::default();
        let base = Image::filled(16, 32, [0.5; 3]);
        let mut top = base.clone();
        let mut mid = base.clone();
        for u in 0..32 {
            for v in 0..2 {
                top.set_pixel(v, u, [0.9, 0.1, 0.5]);
                mid.set_pixel(7 + v, u, [0.9, 0.1, 0.5]);
            }
        }
        assert!(ws_perceptual_loss(&ext, &base, &top).unwrap() < ws_perceptual_loss(&ext, &base, &mid).unwrap());
        assert!(ws_l1_loss(&base, &top).unwrap() < ws_l1_loss(&base, &mid).unwrap());
    }

    #[test]
    fn ws_l1_examples() {
        let a = pano(8, 0.0);
        assert_eq!(ws_l1_loss(&a, &a).unwrap(), 0.0);
        let b = Image::filled(8, 16, [0.4; 3]);
        let c = Image::filled(8, 16, [0.5; 3]);
        assert!((ws_l1_loss(&b, &c).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let s = |m: f64, v: f64| FeatureStats::from_moments(vec![m], vec![v], 10).unwrap();
        assert!(frechet_distance(&s(0.0, 1.0), &s(0.0, 1.0)).unwrap().abs() < 1e-8);
        assert!((frechet_distance(&s(0.0, 1.0), &s(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&s(0.0, 1.0), &s(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&s(0.0, -1.0), &s(0.0, 1.0)).is_err());
        let two = FeatureStats::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 5).unwrap();
        assert!(frechet_distance(&s(0.0, 1.0), &two).is_err());
    }

    #[test]
    fn frechet_symmetric_on_samples() {
        let a: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.01]).collect();
        let b: Vec<Vec<f64>> = (0..15).map(|i| vec![(i as f64).cos(), 0.3 * (i as f64).sin(), 0.5]).collect();
        let (sa, sb) = (FeatureStats::from_samples(&a).unwrap(), FeatureStats::from_samples(&b).unwrap());
        let (ab, ba) = (frechet_distance(&sa, &sb).unwrap(), frechet_distance(&sb, &sa).unwrap());
        assert!((ab - ba).abs() < 1e-6 * ab.max(1.0), "{ab} vs {ba}");
        assert!(frechet_distance(&sa, &sa).unwrap().abs() < 1e-8);
        assert!(FeatureStats::from_samples(&a[..1]).is_err());
    }

    #[test]
    fn diversity_examples() {
        let ext = FeatureExtractor::default();
        let a = pano(8, 0.0);
        assert_eq!(diversity_score(&ext, &[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let set = vec![pano(8, 0.0), pano(8, 0.5), pano(8, 2.0)];
        let rev: Vec<Image> = set.iter().rev().cloned().collect();
        let (d1, d2) = (diversity_score(&ext, &set).unwrap(), diversity_score(&ext, &rev).unwrap());
        assert!((d1 - d2).abs() < 1e-12);
        let pair = diversity_score(&ext, &set[..2]).unwrap();
        assert_eq!(pair, perceptual_loss(&ext, &set[0], &set[1]).unwrap());
        assert!(diversity_score(&ext, &set[..1]).is_err());
    }

    #[test]
    fn seam_examples() {
        let flat = Image::from_fn(4, 8, |v, _| [v as f64 / 4.0; 3]);
        assert_eq!(seam_discontinuity(&flat), 0.0);

        let img = Image::from_fn(4, 8, |_, u| if u == 7 { [1.0; 3] } else { [0.0; 3] });
        // Seam term 1; interior pairs: only (6, 7) differs, by 1, over 7 pairs.
        assert!((seam_discontinuity(&img) - (1.0 - 1.0 / 7.0)).abs() < 1e-12);

        // After a one-column rotation the seam sits on the old (6, 7) boundary.
        let cols = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 1.0];
        let img = Image::from_fn(4, 8, |_, u| [cols[u]; 3]);
        assert!((seam_discontinuity(&img) - (1.0 - 1.0 / 7.0)).abs() < 1e-12);
        let r = rotate_horizontal(&img, 1);
        assert!((seam_discontinuity(&r) - (0.75 - 1.25 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn laplacian_variance_detects_blur() {
        let sharp = Image::from_fn(8, 16, |v, u| [((u + v) % 2) as f64; 3]);
        let flat = Image::filled(8, 16, [0.5; 3]);
        assert!(laplacian_variance(&sharp) > laplacian_variance(&flat));
    }
}
