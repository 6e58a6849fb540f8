//! Finite-difference gradient suite shared by the integration tests.

use std::rc::Rc;

use panofill::autodiff::{Graph, Var};
use panofill::gradcheck::{grad_check, FD_STEP};
use panofill::kernels::PadMode;
use panofill::metrics::{l1_graph, perceptual_loss_graph, FeatureExtractor, SpatialWeighting};
use panofill::models::{Autoencoder, AutoencoderConfig, Discriminator, Variant};
use panofill::nn::AttentionBlock;
use panofill::params::ParameterSet;
use panofill::tensor::Tensor;
use panofill::vq::{quantize_graph, Codebook, BETA};
use panofill::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Values in `±[0.1, 1.1)`, clear of the kinks of relu and abs.
fn away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.1);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(x * c)` for a fixed random `c`, so every output element matters.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let c: Vec<f64> = (0..g.value(x).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = g.mul_const(x, Rc::new(c))?;
    Ok(g.sum(y))
}

type Case = (&'static str, f64);

/// Like `grad_check`, but the analytic gradient of input `i` must equal
/// `scale[i]` times the central difference. Stop-gradient terms make the
/// analytic gradient a known fraction of the value derivative.
fn scaled_check<F>(f: F, inputs: &[Tensor], scale: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe[ti].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = scale[ti] * (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Runs every op and loss check for one seed; returns the worst relative
/// error of each.
pub fn gradient_suite(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let (a, b) = (away(&mut rng, &[2, 3]), away(&mut rng, &[2, 3]));
    out.push(("add", grad_check("add", |g, v| { let y = g.add(v[0], v[1])?; project(g, y, s) }, &[a.clone(), b.clone()])?));
    out.push(("sub", grad_check("sub", |g, v| { let y = g.sub(v[0], v[1])?; project(g, y, s) }, &[a.clone(), b.clone()])?));
    out.push(("mul", grad_check("mul", |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, s) }, &[a.clone(), b.clone()])?));
    out.push(("scale", grad_check("scale", |g, v| { let y = g.scale(v[0], -1.7); project(g, y, s) }, &[a.clone()])?));
    out.push(("square", grad_check("square", |g, v| { let y = g.square(v[0]); project(g, y, s) }, &[a.clone()])?));
    out.push(("abs", grad_check("abs", |g, v| { let y = g.abs(v[0]); project(g, y, s) }, &[a.clone()])?));
    out.push(("relu", grad_check("relu", |g, v| { let y = g.relu(v[0]); project(g, y, s) }, &[a.clone()])?));
    out.push(("leaky_relu", grad_check("leaky_relu", |g, v| { let y = g.leaky_relu(v[0], 0.2); project(g, y, s) }, &[a.clone()])?));
    out.push(("gelu", grad_check("gelu", |g, v| { let y = g.gelu(v[0]); project(g, y, s) }, &[a.clone()])?));
    out.push(("softplus", grad_check("softplus", |g, v| { let y = g.softplus(v[0]); project(g, y, s) }, &[a.clone()])?));
    out.push(("mean", grad_check("mean", |g, v| { let y = g.square(v[0]); Ok(g.mean(y)) }, &[a.clone()])?));
    let c: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    out.push(("mul_const", grad_check("mul_const", |g, v| { let y = g.mul_const(v[0], Rc::new(c.clone()))?; let y = g.square(y); Ok(g.sum(y)) }, &[a.clone()])?));

    let m = away(&mut rng, &[2, 3, 4]);
    let k = away(&mut rng, &[4, 5]);
    let bias = away(&mut rng, &[5]);
    out.push(("matmul", grad_check("matmul", |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, s) }, &[m.clone(), k.clone()])?));
    out.push((
        "add_row_bias",
        grad_check("add_row_bias", |g, v| { let y = g.matmul(v[0], v[1])?; let y = g.add_row_bias(y, v[2])?; let y = g.square(y); project(g, y, s) }, &[m, k, bias])?,
    ));

    let x = away(&mut rng, &[2, 2, 5, 6]);
    let w = away(&mut rng, &[3, 2, 3, 3]);
    let cb = away(&mut rng, &[3]);
    for (name, stride, mode) in [
        ("conv2d_zero", 1, PadMode::Zero),
        ("conv2d_circular", 1, PadMode::CircularWidth),
        ("conv2d_stride2", 2, PadMode::CircularWidth),
    ] {
        let err = grad_check(name, |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1, mode)?; project(g, y, s) }, &[x.clone(), w.clone(), cb.clone()])?;
        out.push((name, err));
    }
    out.push(("upsample2", grad_check("upsample2", |g, v| { let y = g.upsample2(v[0])?; project(g, y, s) }, &[x.clone()])?));
    let x2 = away(&mut rng, &[2, 1, 5, 6]);
    out.push((
        "concat_channels",
        grad_check("concat_channels", |g, v| { let y = g.concat_channels(&[v[0], v[1]])?; let y = g.square(y); project(g, y, s) }, &[x.clone(), x2])?,
    ));
    out.push(("channel_norm", grad_check("channel_norm", |g, v| { let y = g.channel_norm(v[0], 1e-8)?; project(g, y, s) }, &[x.clone()])?));
    out.push((
        "nchw_rows",
        grad_check("nchw_rows", |g, v| { let r = g.nchw_to_rows(v[0])?; let r = g.square(r); let y = g.rows_to_nchw(r, 2, 5, 6)?; project(g, y, s) }, &[x.clone()])?,
    ));
    out.push(("reshape", grad_check("reshape", |g, v| { let y = g.reshape(v[0], &[4, 30])?; project(g, y, s) }, &[x])?));

    let seq = away(&mut rng, &[2, 4, 6]);
    let gamma = uniform(&mut rng, &[6], 0.5, 1.5);
    let beta = away(&mut rng, &[6]);
    out.push(("layer_norm", grad_check("layer_norm", |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; project(g, y, s) }, &[seq.clone(), gamma, beta])?));
    let (q, kk, vv) = (away(&mut rng, &[2, 4, 6]), away(&mut rng, &[2, 4, 6]), away(&mut rng, &[2, 4, 6]));
    out.push(("causal_attention", grad_check("causal_attention", |g, v| { let y = g.causal_attention(v[0], v[1], v[2], 2)?; project(g, y, s) }, &[q, kk, vv])?));

    let logits = away(&mut rng, &[5, 4]);
    let targets: Rc<Vec<Option<usize>>> = Rc::new((0..5).map(|i| if i == 2 { None } else { Some(rng.random_range(0..4)) }).collect());
    out.push(("cross_entropy", grad_check("cross_entropy", |g, v| g.cross_entropy(v[0], targets.clone()), &[logits])?));
    let table = away(&mut rng, &[5, 3]);
    let idx = Rc::new(vec![4, 0, 4, 2]);
    out.push(("gather", grad_check("gather", |g, v| { let y = g.gather(v[0], idx.clone())?; let y = g.square(y); project(g, y, s) }, &[table])?));

    let mut ps = ParameterSet::new();
    let block = AttentionBlock::new(&mut ps, "blk", 6, 2, 8, &mut rng);
    let (qw, fc1) = (ps.id("blk.q.w").unwrap(), ps.id("blk.fc1.w").unwrap());
    let block_inputs = [seq, ps.get(qw).clone(), ps.get(fc1).clone()];
    out.push((
        "attention_block",
        grad_check(
            "attention_block",
            |g, v| {
                let p = ps.bind_frozen(g).with_override(&[(qw, v[1]), (fc1, v[2])]);
                let y = block.forward(g, &p, v[0])?;
                project(g, y, s)
            },
            &block_inputs,
        )?,
    ));

    let ext = FeatureExtractor::new(seed, &[4, 6]);
    let img_a = uniform(&mut rng, &[1, 3, 4, 8], 0.0, 1.0);
    let img_b = uniform(&mut rng, &[1, 3, 4, 8], 0.0, 1.0);
    for (name, mode) in [("perceptual", SpatialWeighting::Uniform), ("ws_perceptual", SpatialWeighting::Latitude)] {
        let err = grad_check(
            name,
            |g, v| {
                let p = ext.bind(g);
                perceptual_loss_graph(g, &ext, &p, v[0], v[1], mode)
            },
            &[img_a.clone(), img_b.clone()],
        )?;
        out.push((name, err));
    }
    let shifted = Tensor::from_fn(&[1, 3, 4, 8], |i| img_a.data()[i] + if rng.random_bool(0.5) { 0.2 } else { -0.2 });
    out.push(("ws_l1", grad_check("ws_l1", |g, v| l1_graph(g, v[0], v[1], true), &[img_a.clone(), shifted.clone()])?));
    out.push(("l1", grad_check("l1", |g, v| l1_graph(g, v[0], v[1], false), &[img_a.clone(), shifted])?));

    let entries = away(&mut rng, &[4, 3]);
    let codebook = Codebook::new(entries.clone())?;
    let ze = Tensor::from_fn(&[6, 3], |i| entries.data()[(i / 3 % 4) * 3 + i % 3] + rng.random_range(-0.05..0.05));
    // The straight-through output has zero value derivative, so the oracle
    // covers the loss terms only.
    let (enc_share, code_share) = (BETA / (1.0 + BETA), 1.0 / (1.0 + BETA));
    out.push(("vq_loss", scaled_check(|g, v| Ok(quantize_graph(g, v[0], v[1], &codebook)?.loss), &[ze, entries], &[enc_share, code_share])?));

    let disc = Discriminator::new(2, &mut rng);
    out.push((
        "gan_generator",
        grad_check(
            "gan_generator",
            |g, v| {
                let p = disc.params.bind_frozen(g);
                let logits = disc.forward(g, &p, v[0])?;
                let neg = g.scale(logits, -1.0);
                let sp = g.softplus(neg);
                Ok(g.mean(sp))
            },
            &[uniform(&mut rng, &[1, 3, 8, 16], 0.0, 1.0)],
        )?,
    ));

    let cfg = AutoencoderConfig { channels: 2, n_z: 2, vocab: 4, downsamples: 1 };
    let ae = Autoencoder::new(cfg, Variant::Vqgan2, &mut rng)?;
    let (enc_w, dec_in, dec_w) = (ae.params.id("enc.in.w").unwrap(), ae.params.id("dec.in.w").unwrap(), ae.params.id("dec.out.w").unwrap());
    let x_img = uniform(&mut rng, &[1, 3, 4, 8], 0.0, 1.0);
    let target = uniform(&mut rng, &[1, 3, 4, 8], 0.0, 1.0);
    let fx = FeatureExtractor::new(seed, &[3]);
    let quantized = |g: &mut Graph, p: &panofill::params::Bound| -> Result<(Var, Var)> {
        let xv = g.constant(x_img.clone());
        let z = ae.encode_graph(g, p, xv)?;
        let [_, _, h, w] = g.value(z).dims4();
        let rows = g.nchw_to_rows(z)?;
        let table = g.constant(ae.codebook.entries().clone());
        let qv = quantize_graph(g, rows, table, &ae.codebook)?;
        Ok((g.rows_to_nchw(qv.quantized, 1, h, w)?, qv.loss))
    };
    out.push((
        "autoencoder_vq_loss",
        scaled_check(
            |g, v| {
                let p = ae.params.bind_frozen(g).with_override(&[(enc_w, v[0])]);
                Ok(quantized(g, &p)?.1)
            },
            &[ae.params.get(enc_w).clone()],
            &[enc_share],
        )?,
    ));
    out.push((
        "autoencoder_reconstruction",
        grad_check(
            "autoencoder_reconstruction",
            |g, v| {
                let p = ae.params.bind_frozen(g).with_override(&[(dec_in, v[0]), (dec_w, v[1])]);
                let (zq, _) = quantized(g, &p)?;
                let tv = g.constant(target.clone());
                let rec = ae.decode_graph(g, &p, zq, PadMode::CircularWidth)?;
                let fp = fx.bind(g);
                let perc = perceptual_loss_graph(g, &fx, &fp, rec, tv, SpatialWeighting::Latitude)?;
                let l1 = l1_graph(g, rec, tv, true)?;
                g.add(perc, l1)
            },
            &[ae.params.get(dec_in).clone(), ae.params.get(dec_w).clone()],
        )?,
    ));

    Ok(out)
}
