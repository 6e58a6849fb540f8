//! Plain numeric kernels shared by the autodiff graph and the cached
//! inference paths. Every reduction runs in a fixed sequential order so
//! results are bit-reproducible.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Wrap the width axis, zero-pad the height axis.
    CircularWidth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub fn padded_h(&self) -> usize {
        self.h + 2 * self.pad
    }

    pub fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    pub fn out_h(&self) -> usize {
        (self.padded_h() - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.padded_w() - self.kw) / self.stride + 1
    }
}

/// Builds the padded input `[n, c, h + 2p, w + 2p]`.
pub fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ph, pw, p) = (g.padded_h(), g.padded_w(), g.pad);
    let mut out = vec![0.0; g.n * g.c * ph * pw];
    for plane in 0..g.n * g.c {
        let src = &x[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
        for y in 0..g.h {
            let srow = &src[y * g.w..(y + 1) * g.w];
            let drow = &mut dst[(y + p) * pw..(y + p + 1) * pw];
            drow[p..p + g.w].copy_from_slice(srow);
            if g.mode == PadMode::CircularWidth {
                for i in 0..p {
                    drow[i] = srow[(g.w + i - p % g.w) % g.w];
                    drow[p + g.w + i] = srow[i % g.w];
                }
            }
        }
    }
    out
}

/// Folds a gradient w.r.t. the padded input back onto the original input.
pub fn unpad_grad(dpad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ph, pw, p) = (g.padded_h(), g.padded_w(), g.pad);
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for plane in 0..g.n * g.c {
        let src = &dpad[plane * ph * pw..(plane + 1) * ph * pw];
        let dst = &mut out[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        for y in 0..g.h {
            let srow = &src[(y + p) * pw..(y + p + 1) * pw];
            let drow = &mut dst[y * g.w..(y + 1) * g.w];
            drow.copy_from_slice(&srow[p..p + g.w]);
            if g.mode == PadMode::CircularWidth {
                for i in 0..p {
                    drow[(g.w + i - p % g.w) % g.w] += srow[i];
                    drow[i % g.w] += srow[p + g.w + i];
                }
            }
        }
    }
    out
}

/// Cross-correlation over a pre-padded input.
pub fn conv2d_forward(padded: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let (oh, ow) = (g.out_h(), g.out_w());
    let s = g.stride;
    let mut out = vec![0.0; g.n * g.o * oh * ow];
    for n in 0..g.n {
        for o in 0..g.o {
            let oplane = &mut out[(n * g.o + o) * oh * ow..(n * g.o + o + 1) * oh * ow];
            if let Some(b) = bias {
                oplane.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.c {
                let iplane = &padded[(n * g.c + c) * ph * pw..(n * g.c + c + 1) * ph * pw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        for oy in 0..oh {
                            let irow = &iplane[(oy * s + ky) * pw..(oy * s + ky + 1) * pw];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (ov, iv) in orow.iter_mut().zip(&irow[kx..kx + ow]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[ox * s + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d padded input, d weight, d bias).
pub fn conv2d_backward(
    padded: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let (oh, ow) = (g.out_h(), g.out_w());
    let s = g.stride;
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.o];
    let mut dpad = if need_input {
        Some(vec![0.0; padded.len()])
    } else {
        None
    };
    for n in 0..g.n {
        for o in 0..g.o {
            let gplane = &dout[(n * g.o + o) * oh * ow..(n * g.o + o + 1) * oh * ow];
            db[o] += gplane.iter().sum::<f64>();
            for c in 0..g.c {
                let ibase = (n * g.c + c) * ph * pw;
                let iplane = &padded[ibase..ibase + ph * pw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let rbase = (oy * s + ky) * pw;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let irow = &iplane[rbase + kx..rbase + kx + ow];
                                for (gv, iv) in grow.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                                if let Some(dp) = dpad.as_mut() {
                                    let drow = &mut dp[ibase + rbase + kx..ibase + rbase + kx + ow];
                                    for (dv, gv) in drow.iter_mut().zip(grow) {
                                        *dv += wv * gv;
                                    }
                                }
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    acc += gv * iplane[rbase + ox * s + kx];
                                }
                                if let Some(dp) = dpad.as_mut() {
                                    for (ox, gv) in grow.iter().enumerate() {
                                        dp[ibase + rbase + ox * s + kx] += wv * gv;
                                    }
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dpad, dw, db)
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `dA = dC B^T`.
pub fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

/// `dB = A^T dC`.
pub fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, gv) in dbrow.iter_mut().zip(drow) {
                *dv += av * gv;
            }
        }
    }
    db
}

/// Normalizes one row in place; returns `(mean, inv_std)`.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
    }
    (mean, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Attention for a single query row against keys/values `[0, len)` of one
/// head. `probs` receives the softmax weights.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    stride: usize,
    offset: usize,
    start: usize,
    len: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let dh = q.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for j in start..len {
        let k = &keys[j * stride + offset..j * stride + offset + dh];
        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
        probs[j] = s;
        if s > max {
            max = s;
        }
    }
    let mut z = 0.0;
    for p in probs[start..len].iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in start..len {
        probs[j] /= z;
        let v = &values[j * stride + offset..j * stride + offset + dh];
        for (o, vv) in out.iter_mut().zip(v) {
            *o += probs[j] * vv;
        }
    }
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in x.iter_mut() {
        *v /= z;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
