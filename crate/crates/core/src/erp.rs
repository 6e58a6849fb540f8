//! Equirectangular geometry: images, latitude weights, known-region masks,
//! rotations, resampling and cubemap/perspective reprojection.
//!
//! Pixel `(v, u)` of an `H x W` panorama has its centre at longitude
//! `(u + 0.5) / W * 360 - 180` degrees and latitude `90 - (v + 0.5) / H * 180`
//! degrees. Directions are `(cos lat sin lon, sin lat, cos lat cos lon)`, so
//! longitude 0 (the image centre) looks down `+z`.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const GRAY: f64 = 0.5;

/// RGB image with values in `[0, 1]`, stored row-major with interleaved
/// channels. Panoramas have `W = 2H` and treat columns `0` and `W - 1` as
/// neighbours; the same type carries planar faces and perspective views.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

pub type ErpImage = Image;

impl Image {
    /// Values are clamped to `[0, 1]`; NaN becomes 0.
    pub fn new(h: usize, w: usize, mut data: Vec<f64>) -> Result<Self> {
        ensure!(h > 0 && w > 0, "image dims must be positive, got {h}x{w}");
        if data.len() != h * w * 3 {
            return Err(Error::shape("image", format!("{h}x{w}x3 needs {} values, got {}", h * w * 3, data.len())));
        }
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(h, w, |_, _| rgb)
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(h, w, data).expect("valid dims")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_panorama(&self) -> bool {
        self.w == 2 * self.h
    }

    pub fn ensure_panorama(&self) -> Result<()> {
        ensure!(self.is_panorama(), "panorama must have W = 2H, got {}x{}", self.h, self.w);
        Ok(())
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.w + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        Tensor::new(&[1, 3, self.h, self.w], out).expect("consistent dims")
    }

    /// Stacks images into `[n, 3, H, W]`.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        ensure!(!images.is_empty(), "empty batch");
        let (h, w) = images[0].dims();
        let mut out = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            ensure!(img.dims() == (h, w), "batch images differ in size");
            out.extend_from_slice(img.to_tensor().data());
        }
        Tensor::new(&[images.len(), 3, h, w], out)
    }

    /// Reads image `index` of an `[n, 3, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4();
        ensure!(c == 3 && index < n, "expected [n, 3, h, w] tensor, got {:?}", t.shape());
        let hw = h * w;
        let base = index * 3 * hw;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                data[p * 3 + ch] = t.data()[base + ch * hw + p];
            }
        }
        Self::new(h, w, data)
    }

    /// Bilinear sample at continuous pixel coordinates (centres at integer
    /// positions). Width wraps when `wrap` is set, otherwise clamps.
    pub fn sample_bilinear(&self, y: f64, x: f64, wrap: bool) -> [f64; 3] {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0f, fx) = {
            let f = x.floor();
            (f, x - f)
        };
        let y0 = y.floor() as usize;
        let fy = y - y0 as f64;
        let y1 = (y0 + 1).min(self.h - 1);
        let col = |xi: f64| -> usize {
            if wrap {
                (xi as i64).rem_euclid(self.w as i64) as usize
            } else {
                xi.clamp(0.0, (self.w - 1) as f64) as usize
            }
        };
        let (x0, x1) = (col(x0f), col(x0f + 1.0));
        let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p01[c] * fx;
            let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Crop of `h x w` starting at `(y0, x0)`; columns wrap.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(y0 + h <= self.h && h > 0 && w > 0 && w <= self.w, "crop {h}x{w}@({y0},{x0}) outside {}x{}", self.h, self.w);
        Ok(Self::from_fn(h, w, |y, x| self.pixel(y0 + y, (x0 + x) % self.w)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::new(h, w, data)
    }

    /// Writes an 8-bit image; the format follows the extension (png, ppm).
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.w as u32, self.h as u32, raw).expect("buffer size matches");
        buf.save(path).map_err(|e| image_error(path, e))
    }

    /// Quantizes to 8 bits and back, matching what a saved file would hold.
    pub fn quantized_u8(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        Self::new(self.h, self.w, data).expect("same dims")
    }
}

/// Per-row spherical area weights `cos((v - H/2 + 1/2) * pi / H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatitudeWeights(Vec<f64>);

impl LatitudeWeights {
    pub fn new(rows: usize) -> Result<Self> {
        ensure!(rows >= 1, "latitude weights need at least one row");
        let hf = rows as f64;
        Ok(Self(
            (0..rows)
                .map(|v| ((v as f64 - hf / 2.0 + 0.5) * PI / hf).cos())
                .collect(),
        ))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

pub fn make_latitude_weights(rows: usize) -> Result<LatitudeWeights> {
    LatitudeWeights::new(rows)
}

fn check_same_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Latitude-weighted PSNR in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn ws_psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims("ws_psnr", a, b)?;
    let wts = LatitudeWeights::new(a.h)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, &wv) in wts.values().iter().enumerate() {
        let row = v * a.w * 3..(v + 1) * a.w * 3;
        let se: f64 = a.data[row.clone()].iter().zip(&b.data[row]).map(|(x, y)| (x - y) * (x - y)).sum();
        num += wv * se;
        den += wv * (a.w * 3) as f64;
    }
    let mse = num / den;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Plain PSNR with peak 1.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims("psnr", a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// How the known (input) region of a panorama is specified.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FovSpec {
    /// `lon_deg x lat_deg` block centred on the equator at `yaw_deg`.
    Angular { lon_deg: f64, lat_deg: f64, yaw_deg: f64 },
    /// Square pinhole view with field of view `fov_deg`.
    Perspective { fov_deg: f64, yaw_deg: f64, pitch_deg: f64 },
}

impl FovSpec {
    pub fn angular(lon_deg: f64, lat_deg: f64) -> Self {
        FovSpec::Angular { lon_deg, lat_deg, yaw_deg: 0.0 }
    }

    pub fn perspective(fov_deg: f64) -> Self {
        FovSpec::Perspective { fov_deg, yaw_deg: 0.0, pitch_deg: 0.0 }
    }

    pub fn full() -> Self {
        Self::angular(360.0, 180.0)
    }

    /// Same spec shifted by `deg` of yaw.
    pub fn with_yaw(self, deg: f64) -> Self {
        match self {
            FovSpec::Angular { lon_deg, lat_deg, .. } => FovSpec::Angular { lon_deg, lat_deg, yaw_deg: deg },
            FovSpec::Perspective { fov_deg, pitch_deg, .. } => FovSpec::Perspective { fov_deg, yaw_deg: deg, pitch_deg },
        }
    }

    /// `angular:180x90@0` or `perspective:90@0,0`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad fov spec {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let (dims, at) = match rest.split_once('@') {
            Some((d, a)) => (d, Some(a)),
            None => (rest, None),
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        match kind.trim() {
            "angular" => {
                let (a, b) = dims.split_once('x').ok_or_else(bad)?;
                let yaw = at.map(num).transpose()?.unwrap_or(0.0);
                Ok(FovSpec::Angular { lon_deg: num(a)?, lat_deg: num(b)?, yaw_deg: yaw })
            }
            "perspective" => {
                let (yaw, pitch) = match at {
                    Some(a) => {
                        let (y, p) = a.split_once(',').unwrap_or((a, "0"));
                        (num(y)?, num(p)?)
                    }
                    None => (0.0, 0.0),
                };
                Ok(FovSpec::Perspective { fov_deg: num(dims)?, yaw_deg: yaw, pitch_deg: pitch })
            }
            _ => Err(bad()),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            FovSpec::Angular { lon_deg, lat_deg, yaw_deg } => format!("angular:{lon_deg}x{lat_deg}@{yaw_deg}"),
            FovSpec::Perspective { fov_deg, yaw_deg, pitch_deg } => format!("perspective:{fov_deg}@{yaw_deg},{pitch_deg}"),
        }
    }
}

/// Known-region grid (`true` = input pixel). The known region is the
/// rectangle `rows [row0, row0 + rows)` x `cols [col0, col0 + cols)` with
/// columns taken modulo `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FovMask {
    h: usize,
    w: usize,
    known: Vec<bool>,
    spec: FovSpec,
    rect: (usize, usize, usize, usize),
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

impl FovMask {
    pub fn from_rect(h: usize, w: usize, row0: usize, rows: usize, col0: usize, cols: usize, spec: FovSpec) -> Result<Self> {
        ensure!(rows > 0 && cols > 0, "fov mask has zero area");
        ensure!(row0 + rows <= h && cols <= w, "mask rectangle outside {h}x{w}");
        let mut known = vec![false; h * w];
        for y in row0..row0 + rows {
            for i in 0..cols {
                known[y * w + (col0 + i) % w] = true;
            }
        }
        Ok(Self { h, w, known, spec, rect: (row0, rows, col0 % w, cols) })
    }

    /// Mask with no known pixel.
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, known: vec![false; h * w], spec: FovSpec::full(), rect: (0, 0, 0, 0) }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn spec(&self) -> FovSpec {
        self.spec
    }

    /// `(row0, rows, col0, cols)`.
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        self.rect
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.known[y * self.w + x]
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn known_fraction(&self) -> f64 {
        self.known.iter().filter(|&&k| k).count() as f64 / self.known.len() as f64
    }

    pub fn all_known(&self) -> bool {
        self.known.iter().all(|&k| k)
    }

    /// The same spec rasterised at another resolution.
    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Self> {
        if self.rect.1 == 0 {
            return Ok(Self::empty(h, w));
        }
        make_fov_mask(&self.spec, h, w)
    }

    /// Horizontally shifted copy (content moves right by `shift`).
    pub fn rotated(&self, shift: i64) -> Self {
        let s = shift.rem_euclid(self.w as i64) as usize;
        let mut known = vec![false; self.known.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                known[y * self.w + (x + s) % self.w] = self.known[y * self.w + x];
            }
        }
        let (r0, rows, c0, cols) = self.rect;
        let deg = s as f64 * 360.0 / self.w as f64;
        let spec = match self.spec {
            FovSpec::Angular { yaw_deg, .. } | FovSpec::Perspective { yaw_deg, .. } => self.spec.with_yaw(yaw_deg + deg),
        };
        Self { h: self.h, w: self.w, known, spec, rect: (r0, rows, (c0 + s) % self.w, cols) }
    }

    /// Token-level mask: a cell is known when every pixel of its block is.
    pub fn downsample_all(&self, cells_h: usize, cells_w: usize) -> Result<Vec<bool>> {
        ensure!(self.h % cells_h == 0 && self.w % cells_w == 0, "mask {}x{} not divisible into {cells_h}x{cells_w}", self.h, self.w);
        let (bh, bw) = (self.h / cells_h, self.w / cells_w);
        let mut out = vec![false; cells_h * cells_w];
        for cy in 0..cells_h {
            for cx in 0..cells_w {
                out[cy * cells_w + cx] = (0..bh).all(|y| (0..bw).all(|x| self.is_known(cy * bh + y, cx * bw + x)));
            }
        }
        Ok(out)
    }
}

/// Rasterises a field-of-view spec at `h x w`.
///
/// Angular specs mark a centred block of `round(W * A / 360)` columns by
/// `round(H * B / 180)` rows (round half up). Perspective specs mark the
/// bounding rectangle of the pinhole frustum's footprint.
pub fn make_fov_mask(spec: &FovSpec, h: usize, w: usize) -> Result<FovMask> {
    ensure!(h > 0 && w > 0, "mask dims must be positive");
    match *spec {
        FovSpec::Angular { lon_deg, lat_deg, yaw_deg } => {
            ensure!(
                lon_deg > 0.0 && lon_deg <= 360.0 && lat_deg > 0.0 && lat_deg <= 180.0,
                "angular fov {lon_deg}x{lat_deg} out of range"
            );
            let cols = round_half_up(w as f64 * lon_deg / 360.0).clamp(0, w as i64) as usize;
            let rows = round_half_up(h as f64 * lat_deg / 180.0).clamp(0, h as i64) as usize;
            ensure!(cols > 0 && rows > 0, "fov mask has zero area");
            let row0 = (h - rows) / 2;
            let shift = round_half_up(yaw_deg * w as f64 / 360.0);
            let col0 = (((w - cols) / 2) as i64 + shift).rem_euclid(w as i64) as usize;
            FovMask::from_rect(h, w, row0, rows, col0, cols, *spec)
        }
        FovSpec::Perspective { fov_deg, yaw_deg, pitch_deg } => {
            ensure!(fov_deg > 0.0 && fov_deg < 180.0, "perspective fov {fov_deg} out of range");
            let cam = Camera::new(yaw_deg, pitch_deg);
            let t = (fov_deg.to_radians() / 2.0).tan();
            let mut row_hit = vec![false; h];
            let mut col_hit = vec![false; w];
            for v in 0..h {
                for u in 0..w {
                    let d = pixel_dir(v, u, h, w);
                    let z = dot(d, cam.forward);
                    if z <= 0.0 {
                        continue;
                    }
                    if (dot(d, cam.right) / z).abs() <= t && (dot(d, cam.up) / z).abs() <= t {
                        row_hit[v] = true;
                        col_hit[u] = true;
                    }
                }
            }
            let r0 = row_hit.iter().position(|&x| x);
            let r1 = row_hit.iter().rposition(|&x| x);
            let (Some(r0), Some(r1)) = (r0, r1) else {
                return Err(Error::contract("fov mask has zero area"));
            };
            let (c0, cols) = covering_arc(&col_hit);
            FovMask::from_rect(h, w, r0, r1 - r0 + 1, c0, cols, *spec)
        }
    }
}

/// Smallest wrapping interval covering every `true` entry: the complement
/// of the longest circular run of `false`.
fn covering_arc(hit: &[bool]) -> (usize, usize) {
    let w = hit.len();
    if hit.iter().all(|&x| x) {
        return (0, w);
    }
    let mut best_start = 0;
    let mut best_len = 0;
    for start in 0..w {
        if hit[start] || !hit[(start + w - 1) % w] {
            continue;
        }
        let mut len = 0;
        while len < w && !hit[(start + len) % w] {
            len += 1;
        }
        if len > best_len {
            best_len = len;
            best_start = start;
        }
    }
    ((best_start + best_len) % w, w - best_len)
}

/// Unknown pixels become [`GRAY`]; known pixels are copied exactly.
pub fn apply_mask_gray(img: &Image, mask: &FovMask) -> Result<Image> {
    if img.dims() != (mask.h, mask.w) {
        return Err(Error::shape("apply_mask_gray", format!("{:?} vs {}x{}", img.dims(), mask.h, mask.w)));
    }
    let mut out = img.clone();
    for (p, &k) in mask.known.iter().enumerate() {
        if !k {
            out.data[p * 3..p * 3 + 3].fill(GRAY);
        }
    }
    Ok(out)
}

/// Copies known pixels of `src` over `dst`.
pub fn composite_known(dst: &Image, src: &Image, mask: &FovMask) -> Result<Image> {
    check_same_dims("composite_known", dst, src)?;
    if dst.dims() != (mask.h, mask.w) {
        return Err(Error::shape("composite_known", "mask dims"));
    }
    let mut out = dst.clone();
    for (p, &k) in mask.known.iter().enumerate() {
        if k {
            out.data[p * 3..p * 3 + 3].copy_from_slice(&src.data[p * 3..p * 3 + 3]);
        }
    }
    Ok(out)
}

/// Cyclic column shift: output column `(u + shift) mod W` is input column `u`.
pub fn rotate_horizontal(img: &Image, shift: i64) -> Image {
    let s = shift.rem_euclid(img.w as i64) as usize;
    let mut data = vec![0.0; img.data.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            let src = (y * img.w + x) * 3;
            let dst = (y * img.w + (x + s) % img.w) * 3;
            data[dst..dst + 3].copy_from_slice(&img.data[src..src + 3]);
        }
    }
    Image { h: img.h, w: img.w, data }
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic (Keys, a = -0.5) resampling to `h x w`. Columns wrap when
/// `wrap_width` is set; rows always clamp.
pub fn resize_bicubic(img: &Image, h: usize, w: usize, wrap_width: bool) -> Result<Image> {
    ensure!(h > 0 && w > 0, "resize target must be positive");
    if (h, w) == img.dims() {
        return Ok(img.clone());
    }
    let taps = |out_len: usize, in_len: usize, wrap: bool| -> Vec<[(usize, f64); 4]> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let mut t = [(0usize, 0.0f64); 4];
                for (k, slot) in t.iter_mut().enumerate() {
                    let i = base as i64 - 1 + k as i64;
                    let idx = if wrap {
                        i.rem_euclid(in_len as i64)
                    } else {
                        i.clamp(0, in_len as i64 - 1)
                    } as usize;
                    *slot = (idx, cubic_weight(src - i as f64));
                }
                t
            })
            .collect()
    };
    let ty = taps(h, img.h, false);
    let tx = taps(w, img.w, wrap_width);
    // Horizontal pass then vertical pass.
    let mut tmp = vec![0.0; img.h * w * 3];
    for y in 0..img.h {
        for (x, t) in tx.iter().enumerate() {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = t.iter().map(|&(i, wt)| wt * img.data[(y * img.w + i) * 3 + c]).sum();
            }
        }
    }
    let mut out = vec![0.0; h * w * 3];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = t.iter().map(|&(i, wt)| wt * tmp[(i * w + x) * 3 + c]).sum();
            }
        }
    }
    Image::new(h, w, out)
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn lonlat_dir(lon: f64, lat: f64) -> Vec3 {
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

/// Longitude and latitude (radians) of the centre of pixel `(v, u)`.
pub fn pixel_lonlat(v: usize, u: usize, h: usize, w: usize) -> (f64, f64) {
    let lon = (u as f64 + 0.5) / w as f64 * 2.0 * PI - PI;
    let lat = PI / 2.0 - (v as f64 + 0.5) / h as f64 * PI;
    (lon, lat)
}

fn pixel_dir(v: usize, u: usize, h: usize, w: usize) -> Vec3 {
    let (lon, lat) = pixel_lonlat(v, u, h, w);
    lonlat_dir(lon, lat)
}

/// Bilinear sample of a panorama along direction `d`.
pub fn sample_dir(img: &Image, d: Vec3) -> [f64; 3] {
    let n = dot(d, d).sqrt();
    let lon = d[0].atan2(d[2]);
    let lat = (d[1] / n).clamp(-1.0, 1.0).asin();
    let x = (lon + PI) / (2.0 * PI) * img.w as f64 - 0.5;
    let y = (PI / 2.0 - lat) / PI * img.h as f64 - 0.5;
    img.sample_bilinear(y, x, true)
}

struct Camera {
    forward: Vec3,
    right: Vec3,
    up: Vec3,
}

impl Camera {
    fn new(yaw_deg: f64, pitch_deg: f64) -> Self {
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let forward = lonlat_dir(yaw, pitch);
        let right = [yaw.cos(), 0.0, -yaw.sin()];
        let up = cross(forward, right);
        Self { forward, right, up }
    }
}

/// Pinhole view with horizontal field of view `fov_deg`.
pub fn erp_to_perspective(img: &Image, yaw_deg: f64, pitch_deg: f64, fov_deg: f64, out_w: usize, out_h: usize) -> Result<Image> {
    ensure!(fov_deg > 0.0 && fov_deg < 180.0, "fov {fov_deg} out of (0, 180)");
    ensure!(out_w > 0 && out_h > 0, "output size must be positive");
    ensure!(pitch_deg.abs() <= 90.0, "pitch {pitch_deg} out of range");
    let cam = Camera::new(yaw_deg, pitch_deg);
    let tx = (fov_deg.to_radians() / 2.0).tan();
    let ty = tx * out_h as f64 / out_w as f64;
    Ok(Image::from_fn(out_h, out_w, |j, i| {
        let a = (2.0 * (i as f64 + 0.5) / out_w as f64 - 1.0) * tx;
        let b = (2.0 * (j as f64 + 0.5) / out_h as f64 - 1.0) * ty;
        let d = [
            cam.forward[0] + a * cam.right[0] - b * cam.up[0],
            cam.forward[1] + a * cam.right[1] - b * cam.up[1],
            cam.forward[2] + a * cam.right[2] - b * cam.up[2],
        ];
        sample_dir(img, d)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Face {
    Front,
    Right,
    Back,
    Left,
    Top,
    Bottom,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Front, Face::Right, Face::Back, Face::Left, Face::Top, Face::Bottom];
    pub const LATERAL: [Face; 4] = [Face::Front, Face::Right, Face::Back, Face::Left];

    /// Direction through face coordinates `a` (rightwards) and `b`
    /// (downwards), both in `[-1, 1]`. Lateral faces keep `+y` up; the top
    /// face has the front face below it, the bottom face has it above.
    pub fn dir(self, a: f64, b: f64) -> Vec3 {
        match self {
            Face::Front => [a, -b, 1.0],
            Face::Right => [1.0, -b, -a],
            Face::Back => [-a, -b, -1.0],
            Face::Left => [-1.0, -b, a],
            Face::Top => [a, 1.0, b],
            Face::Bottom => [a, -1.0, -b],
        }
    }

    /// Inverse of [`Face::dir`]: the face hit by `d` and its `(a, b)`.
    pub fn locate(d: Vec3) -> (Face, f64, f64) {
        let [x, y, z] = d;
        let (ax, ay, az) = (x.abs(), y.abs(), z.abs());
        if ax >= ay && ax >= az {
            if x > 0.0 {
                (Face::Right, -z / ax, -y / ax)
            } else {
                (Face::Left, z / ax, -y / ax)
            }
        } else if az >= ay {
            if z > 0.0 {
                (Face::Front, x / az, -y / az)
            } else {
                (Face::Back, -x / az, -y / az)
            }
        } else if y > 0.0 {
            (Face::Top, x / ay, z / ay)
        } else {
            (Face::Bottom, x / ay, -z / ay)
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Six square faces, each a 90 x 90 degree frustum.
#[derive(Clone, Debug, PartialEq)]
pub struct CubemapFaces {
    size: usize,
    faces: Vec<Image>,
}

impl CubemapFaces {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn face(&self, f: Face) -> &Image {
        &self.faces[f.index()]
    }

    /// Front, right, back and left faces (top and bottom removed).
    pub fn drop_top_bottom(&self) -> [&Image; 4] {
        Face::LATERAL.map(|f| self.face(f))
    }
}

pub fn erp_to_cubemap(img: &Image, face_size: usize) -> Result<CubemapFaces> {
    img.ensure_panorama()?;
    ensure!(face_size > 0, "face size must be positive");
    let s = face_size as f64;
    let faces = Face::ALL
        .iter()
        .map(|&f| {
            Image::from_fn(face_size, face_size, |j, i| {
                let a = 2.0 * (i as f64 + 0.5) / s - 1.0;
                let b = 2.0 * (j as f64 + 0.5) / s - 1.0;
                sample_dir(img, f.dir(a, b))
            })
        })
        .collect();
    Ok(CubemapFaces { size: face_size, faces })
}

pub fn cubemap_to_erp(faces: &CubemapFaces, h: usize) -> Result<Image> {
    ensure!(h > 0, "panorama height must be positive");
    let s = faces.size as f64;
    Ok(Image::from_fn(h, 2 * h, |v, u| {
        let (face, a, b) = Face::locate(pixel_dir(v, u, h, 2 * h));
        let x = (a + 1.0) / 2.0 * s - 0.5;
        let y = (b + 1.0) / 2.0 * s - 0.5;
        faces.face(face).sample_bilinear(y, x, false)
    }))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        e => Error::Image(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_pano(h: usize) -> Image {
        Image::from_fn(h, 2 * h, |v, u| {
            let (lon, lat) = pixel_lonlat(v, u, h, 2 * h);
            [
                0.5 + 0.4 * lat.sin(),
                0.5 + 0.3 * (2.0 * lon).cos() * lat.cos(),
                0.5 + 0.2 * (lon + 0.3).sin() * lat.cos(),
            ]
        })
    }

    #[test]
    fn latitude_weights_examples() {
        assert_eq!(make_latitude_weights(1).unwrap().values(), &[1.0]);
        let w = make_latitude_weights(4).unwrap();
        let expected = [0.38268, 0.92388, 0.92388, 0.38268];
        for (a, b) in w.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(make_latitude_weights(0).is_err());
    }

    #[test]
    fn ws_psnr_examples() {
        let a = test_pano(8);
        assert_eq!(ws_psnr(&a, &a).unwrap(), f64::INFINITY);

        let base = Image::filled(8, 16, [0.5; 3]);
        let off = Image::filled(8, 16, [0.6; 3]);
        assert!((ws_psnr(&base, &off).unwrap() - 20.0).abs() < 1e-9);

        let mut top = base.clone();
        let mut mid = base.clone();
        for u in 0..16 {
            top.set_pixel(0, u, [0.8; 3]);
            mid.set_pixel(4, u, [0.8; 3]);
        }
        assert!(ws_psnr(&base, &top).unwrap() > ws_psnr(&base, &mid).unwrap());
        assert!(ws_psnr(&base, &Image::filled(4, 8, [0.5; 3])).is_err());
    }

    #[test]
    fn fov_mask_examples() {
        let full = make_fov_mask(&FovSpec::full(), 64, 128).unwrap();
        assert!(full.all_known());

        let m = make_fov_mask(&FovSpec::angular(180.0, 90.0), 64, 128).unwrap();
        assert_eq!(m.rect(), (16, 32, 32, 64));
        assert!(m.is_known(16, 32) && m.is_known(47, 95));
        assert!(!m.is_known(15, 32) && !m.is_known(16, 96) && !m.is_known(48, 64));

        let q = make_fov_mask(&FovSpec::angular(90.0, 90.0), 64, 128).unwrap();
        assert!((q.known_fraction() - 0.125).abs() < 1e-12);

        assert!(make_fov_mask(&FovSpec::angular(0.0, 90.0), 64, 128).is_err());
        assert!(make_fov_mask(&FovSpec::angular(1.0, 1.0), 8, 16).is_err());
    }

    #[test]
    fn fov_mask_wraps_with_yaw() {
        let m = make_fov_mask(&FovSpec::angular(90.0, 90.0).with_yaw(180.0), 32, 64).unwrap();
        assert!(m.is_known(16, 0) && m.is_known(16, 63));
        assert!(!m.is_known(16, 32));
    }

    #[test]
    fn perspective_mask_matches_angular_footprint() {
        let p = make_fov_mask(&FovSpec::perspective(90.0), 64, 128).unwrap();
        let (r0, rows, c0, cols) = p.rect();
        assert_eq!((r0, rows), (16, 32));
        assert_eq!((c0, cols), (48, 32));
        let wrapped = make_fov_mask(&FovSpec::Perspective { fov_deg: 60.0, yaw_deg: 180.0, pitch_deg: 0.0 }, 32, 64).unwrap();
        assert!(wrapped.is_known(16, 0) && wrapped.is_known(16, 63));
    }

    #[test]
    fn fov_spec_text_round_trip() {
        for s in [FovSpec::angular(180.0, 90.0), FovSpec::Perspective { fov_deg: 90.0, yaw_deg: 10.0, pitch_deg: -5.0 }] {
            assert_eq!(FovSpec::parse(&s.to_text()).unwrap(), s);
        }
        assert!(FovSpec::parse("fisheye:180").is_err());
    }

    #[test]
    fn gray_fill_examples() {
        let img = test_pano(8);
        let full = make_fov_mask(&FovSpec::full(), 8, 16).unwrap();
        assert_eq!(apply_mask_gray(&img, &full).unwrap(), img);
        let none = FovMask { h: 8, w: 16, known: vec![false; 128], spec: FovSpec::full(), rect: (0, 0, 0, 0) };
        assert!(apply_mask_gray(&img, &none).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rotation_examples() {
        let img = test_pano(8);
        assert_eq!(rotate_horizontal(&img, 16), img);
        assert_eq!(rotate_horizontal(&rotate_horizontal(&img, 5), 11), img);
        assert_eq!(rotate_horizontal(&img, -3), rotate_horizontal(&img, 13));
        let r = rotate_horizontal(&img, 1);
        assert_eq!(r.pixel(2, 1), img.pixel(2, 0));
        assert_eq!(r.pixel(2, 0), img.pixel(2, 15));
    }

    #[test]
    fn bicubic_preserves_constants_and_identity() {
        let c = Image::filled(8, 16, [0.3, 0.6, 0.9]);
        let up = resize_bicubic(&c, 16, 32, true).unwrap();
        assert!(up.data().chunks(3).all(|p| (p[0] - 0.3).abs() < 1e-12 && (p[2] - 0.9).abs() < 1e-12));
        let img = test_pano(8);
        assert_eq!(resize_bicubic(&img, 8, 16, true).unwrap(), img);
        let down = resize_bicubic(&resize_bicubic(&img, 16, 32, true).unwrap(), 8, 16, true).unwrap();
        assert!(psnr(&img, &down).unwrap() > 30.0);
    }

    #[test]
    fn cubemap_constant_and_front_center() {
        let c = Image::filled(16, 32, [0.2, 0.4, 0.6]);
        let faces = erp_to_cubemap(&c, 8).unwrap();
        for f in Face::ALL {
            assert!(faces.face(f).data().chunks(3).all(|p| (p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12));
        }
        // Odd face size puts a pixel centre exactly on the optical axis,
        // which lands between the two centre columns of the equator rows.
        let img = test_pano(16);
        let faces = erp_to_cubemap(&img, 9).unwrap();
        let center = faces.face(Face::Front).pixel(4, 4);
        let expected = img.sample_bilinear(7.5, 15.5, true);
        for c in 0..3 {
            assert!((center[c] - expected[c]).abs() < 1e-12);
        }
        assert!(erp_to_cubemap(&img, 0).is_err());
        assert!(erp_to_cubemap(&Image::filled(8, 8, [0.0; 3]), 4).is_err());
    }

    #[test]
    fn face_locate_inverts_dir() {
        for f in Face::ALL {
            for (a, b) in [(0.0, 0.0), (0.5, -0.25), (-0.9, 0.8)] {
                let (g, a2, b2) = Face::locate(f.dir(a, b));
                assert_eq!(g, f);
                assert!((a - a2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perspective_examples() {
        let c = Image::filled(16, 32, [0.7; 3]);
        let p = erp_to_perspective(&c, 30.0, 10.0, 90.0, 8, 6).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let split = Image::from_fn(32, 64, |v, u| {
            let (lon, _) = pixel_lonlat(v, u, 32, 64);
            if lon.abs() < PI / 2.0 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            }
        });
        let view = erp_to_perspective(&split, 0.0, 0.0, 90.0, 16, 16).unwrap();
        assert!(view.data().chunks(3).all(|p| p == [1.0, 0.0, 0.0]));
        assert!(erp_to_perspective(&split, 0.0, 0.0, 180.0, 4, 4).is_err());
    }
}
