//! Vector-quantisation bottleneck and token grid/sequence bookkeeping.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Commitment coefficient.
pub const BETA: f64 = 0.25;

/// `K x n_z` embedding table with per-entry usage counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage: Vec<u32>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        ensure!(entries.shape().len() == 2, "codebook must be 2-D, got {:?}", entries.shape());
        let k = entries.shape()[0];
        ensure!(k >= 2, "codebook needs at least 2 entries, got {k}");
        ensure!(entries.is_finite(), "codebook entries must be finite");
        Ok(Self { entries, usage: vec![0; k] })
    }

    pub fn random(k: usize, n_z: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / k as f64;
        Self::new(Tensor::from_fn(&[k, n_z], |_| rng.random_range(-bound..bound)))
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[i * d..(i + 1) * d]
    }

    pub fn set_entries(&mut self, t: Tensor) -> Result<()> {
        if t.shape() != self.entries.shape() {
            return Err(Error::shape("codebook", format!("{:?} vs {:?}", t.shape(), self.entries.shape())));
        }
        self.entries = t;
        Ok(())
    }

    pub fn usage(&self) -> &[u32] {
        &self.usage
    }

    pub fn set_usage(&mut self, usage: Vec<u32>) -> Result<()> {
        ensure!(usage.len() == self.len(), "usage length mismatch");
        self.usage = usage;
        Ok(())
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d: f64 = self.entry(i).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Nearest-entry indices for `rows` of width `n_z`.
    pub fn assign(&self, rows: &[f64]) -> Result<Vec<usize>> {
        let d = self.dim();
        ensure!(rows.len() % d == 0, "feature width does not match codebook dim {d}");
        Ok(rows.chunks(d).map(|r| self.nearest(r).0).collect())
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] = self.usage[i].saturating_add(1);
        }
    }

    /// Sets entry `i` to feature row `i mod n` plus a small uniform jitter
    /// so repeated rows still give distinct entries.
    pub fn init_from_rows(&mut self, rows: &[f64], rng: &mut impl Rng) -> Result<()> {
        let d = self.dim();
        let n = rows.len() / d;
        ensure!(n > 0 && rows.len() % d == 0, "need at least one feature row of width {d}");
        for i in 0..self.len() {
            let r = i % n;
            for j in 0..d {
                self.entries.data_mut()[i * d + j] = rows[r * d + j] + rng.random_range(-1e-3..1e-3);
            }
        }
        Ok(())
    }

    /// Re-seeds entries with zero usage from randomly chosen feature rows
    /// and resets the counters. Returns how many entries were re-seeded.
    pub fn reseed_dead(&mut self, rows: &[f64], rng: &mut impl Rng) -> usize {
        let d = self.dim();
        let n = rows.len() / d;
        if n == 0 {
            return 0;
        }
        let mut count = 0;
        for i in 0..self.len() {
            if self.usage[i] == 0 {
                let pick = rng.random_range(0..n);
                self.entries.data_mut()[i * d..(i + 1) * d].copy_from_slice(&rows[pick * d..(pick + 1) * d]);
                count += 1;
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        count
    }
}

/// `h x w` token indices. The value `vocab` marks an unknown cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    vocab: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, vocab: usize, tokens: Vec<usize>) -> Result<Self> {
        ensure!(tokens.len() == h * w, "grid {h}x{w} needs {} tokens, got {}", h * w, tokens.len());
        ensure!(tokens.iter().all(|&t| t <= vocab), "token index out of range {vocab}");
        Ok(Self { h, w, vocab, tokens })
    }

    pub fn unknown(h: usize, w: usize, vocab: usize) -> Self {
        Self { h, w, vocab, tokens: vec![vocab; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn unknown_marker(&self) -> usize {
        self.vocab
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.tokens[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, t: usize) {
        assert!(t <= self.vocab);
        self.tokens[r * self.w + c] = t;
    }

    pub fn is_unknown(&self, r: usize, c: usize) -> bool {
        self.get(r, c) == self.vocab
    }

    pub fn is_complete(&self) -> bool {
        self.tokens.iter().all(|&t| t < self.vocab)
    }

    pub fn known_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t < self.vocab).collect()
    }

    /// Copy with cells where `known` is false replaced by the marker.
    pub fn masked(&self, known: &[bool]) -> Result<Self> {
        ensure!(known.len() == self.tokens.len(), "mask size mismatch");
        let tokens = self.tokens.iter().zip(known).map(|(&t, &k)| if k { t } else { self.vocab }).collect();
        Ok(Self { tokens, ..self.clone() })
    }

    /// Number of positions where two grids differ.
    pub fn hamming(&self, other: &TokenGrid) -> usize {
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }
}

/// Result of quantising a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// `h x w x n_z` codebook vectors.
    pub features: Tensor,
    pub grid: TokenGrid,
    pub vq_loss: f64,
}

/// Nearest-neighbour quantisation of `h x w x n_z` features.
pub fn quantize(features: &Tensor, cb: &Codebook) -> Result<Quantized> {
    ensure!(!cb.is_empty(), "empty codebook");
    let s = features.shape();
    ensure!(s.len() == 3 && s[2] == cb.dim(), "features {:?} do not match codebook dim {}", s, cb.dim());
    let (h, w) = (s[0], s[1]);
    let mut g = Graph::new();
    let ze = g.constant(features.clone().reshape(&[h * w, cb.dim()])?);
    let table = g.constant(cb.entries.clone());
    let q = quantize_graph(&mut g, ze, table, cb)?;
    let feats = g.value(q.quantized).clone().reshape(&[h, w, cb.dim()])?;
    Ok(Quantized {
        features: feats,
        grid: TokenGrid::new(h, w, cb.len(), q.indices.to_vec())?,
        vq_loss: g.value(q.loss).item(),
    })
}

/// Table lookup back to `h x w x n_z` features.
pub fn dequantize(grid: &TokenGrid, cb: &Codebook) -> Result<Tensor> {
    ensure!(grid.vocab == cb.len(), "grid vocabulary {} differs from codebook size {}", grid.vocab, cb.len());
    let d = cb.dim();
    let mut out = Vec::with_capacity(grid.tokens.len() * d);
    for &t in &grid.tokens {
        ensure!(t < cb.len(), "token {t} out of range {}", cb.len());
        out.extend_from_slice(cb.entry(t));
    }
    Tensor::new(&[grid.h, grid.w, d], out)
}

/// Graph outputs of the quantiser.
#[derive(Clone, Debug)]
pub struct QuantizeVars {
    /// Straight-through output: forward value is the codebook vector,
    /// gradient passes unchanged to the encoder features.
    pub quantized: Var,
    /// `||sg[z_e] - e||^2 + beta ||z_e - sg[e]||^2`, squared norms averaged
    /// over positions.
    pub loss: Var,
    pub indices: Rc<Vec<usize>>,
}

/// Quantises encoder rows `z_e: [m, n_z]` against the table variable
/// (which may be trainable). `cb` supplies the current assignment values.
pub fn quantize_graph(g: &mut Graph, ze: Var, table: Var, cb: &Codebook) -> Result<QuantizeVars> {
    let d = cb.dim();
    let zshape = g.shape(ze).to_vec();
    ensure!(zshape.len() == 2 && zshape[1] == d, "encoder rows {:?} vs codebook dim {d}", zshape);
    let m = zshape[0] as f64;
    let tv = g.value(table).clone();
    let probe = Codebook { entries: tv, usage: vec![] };
    let indices = Rc::new(probe.assign(g.value(ze).data())?);
    let e = g.gather(table, indices.clone())?;

    let ze_const = g.detach(ze);
    let e_const = g.detach(e);
    let codebook_term = {
        let diff = g.sub(ze_const, e)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        g.scale(s, 1.0 / m)
    };
    let commit_term = {
        let diff = g.sub(ze, e_const)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        g.scale(s, BETA / m)
    };
    let loss = g.add(codebook_term, commit_term)?;

    let offset = {
        let delta: Vec<f64> = g.value(e).data().iter().zip(g.value(ze).data()).map(|(a, b)| a - b).collect();
        g.constant(Tensor::new(&zshape, delta)?)
    };
    let quantized = g.add(ze, offset)?;
    Ok(QuantizeVars { quantized, loss, indices })
}

/// Condition tokens followed by target tokens, with the grid cell of each
/// element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub h: usize,
    pub w: usize,
    pub vocab: usize,
    /// Tokens in sequence order (`cond` elements first). Unsampled targets
    /// hold the unknown marker.
    pub tokens: Vec<usize>,
    /// Row-major grid cell of each element.
    pub cells: Vec<usize>,
    pub n_cond: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cond(&self) -> &[usize] {
        &self.tokens[..self.n_cond]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[self.n_cond..]
    }

    pub fn target_cells(&self) -> &[usize] {
        &self.cells[self.n_cond..]
    }
}

/// Known cells (raster order) become the condition, unknown cells the
/// targets (raster order). Target tokens are taken from `grid`, so pass the
/// full grid for training and a marker-filled grid for sampling.
pub fn grid_to_sequence(grid: &TokenGrid, known: &[bool]) -> Result<TokenSequence> {
    ensure!(known.len() == grid.tokens.len(), "mask dims differ from grid dims");
    let mut tokens = Vec::with_capacity(known.len());
    let mut cells = Vec::with_capacity(known.len());
    for (i, _) in known.iter().enumerate().filter(|(_, &k)| k) {
        tokens.push(grid.tokens[i]);
        cells.push(i);
    }
    let n_cond = tokens.len();
    for (i, _) in known.iter().enumerate().filter(|(_, &k)| !k) {
        tokens.push(grid.tokens[i]);
        cells.push(i);
    }
    Ok(TokenSequence { h: grid.h, w: grid.w, vocab: grid.vocab, tokens, cells, n_cond })
}

pub fn sequence_to_grid(seq: &TokenSequence) -> Result<TokenGrid> {
    ensure!(seq.tokens.len() == seq.h * seq.w && seq.cells.len() == seq.tokens.len(), "sequence does not cover the grid");
    let mut tokens = vec![usize::MAX; seq.h * seq.w];
    for (&c, &t) in seq.cells.iter().zip(&seq.tokens) {
        ensure!(c < tokens.len() && tokens[c] == usize::MAX, "cell mapping is not a bijection");
        tokens[c] = t;
    }
    TokenGrid::new(seq.h, seq.w, seq.vocab, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterSet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb2() -> Codebook {
        Codebook::new(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn nearest_neighbour_examples() {
        let cb = cb2();
        let q = quantize(&Tensor::new(&[1, 1, 2], vec![0.9, 0.8]).unwrap(), &cb).unwrap();
        assert_eq!(q.grid.tokens(), &[1]);

        let q = quantize(&Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap(), &cb).unwrap();
        assert_eq!(q.grid.tokens(), &[1]);
        assert_eq!(q.vq_loss, 0.0);

        let q = quantize(&Tensor::new(&[1, 1, 2], vec![0.5, 0.5]).unwrap(), &cb).unwrap();
        assert_eq!(q.grid.tokens(), &[0]);
    }

    #[test]
    fn vq_loss_value() {
        // z = (0.9, 0.8) -> e = (1, 1); squared distance 0.05.
        let q = quantize(&Tensor::new(&[1, 1, 2], vec![0.9, 0.8]).unwrap(), &cb2()).unwrap();
        assert!((q.vq_loss - 0.05 * (1.0 + BETA)).abs() < 1e-12);
    }

    #[test]
    fn codebook_errors() {
        assert!(Codebook::new(Tensor::zeros(&[1, 4])).is_err());
        assert!(Codebook::new(Tensor::new(&[2, 1], vec![0.0, f64::NAN]).unwrap()).is_err());
        let cb = cb2();
        assert!(quantize(&Tensor::zeros(&[1, 1, 3]), &cb).is_err());
        let bad = TokenGrid::new(1, 1, 2, vec![2]).unwrap();
        assert!(dequantize(&bad, &cb).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = Codebook::random(8, 4, &mut rng).unwrap();
        let g = TokenGrid::new(2, 3, 8, vec![5; 6]).unwrap();
        let f = dequantize(&g, &cb).unwrap();
        assert!(f.data().chunks(4).all(|c| c == cb.entry(5)));

        let mut e = cb.entries().clone();
        e.data_mut()[..4].fill(0.0);
        cb.set_entries(e).unwrap();
        let z = dequantize(&TokenGrid::new(2, 2, 8, vec![0; 4]).unwrap(), &cb).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::random(6, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let ze = g.leaf(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
        let table = g.constant(cb.entries().clone());
        let q = quantize_graph(&mut g, ze, table, &cb).unwrap();
        // Hand-built loss on the quantised output: sum(c_i * q_i^2).
        let coeffs: Vec<f64> = (0..12).map(|i| 1.0 + i as f64 * 0.1).collect();
        let sq = g.square(q.quantized);
        let weighted = g.mul_const(sq, Rc::new(coeffs)).unwrap();
        let loss = g.sum(weighted);
        let grads = g.backward(loss).unwrap();
        let dq = grads.get(q.quantized).unwrap();
        let dz = grads.get(ze).unwrap();
        assert_eq!(dq, dz);
    }

    #[test]
    fn codebook_step_moves_entries_toward_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = Codebook::random(4, 2, &mut rng).unwrap();
        let feats = Tensor::from_fn(&[16, 2], |i| ((i * 7) % 5) as f64 * 0.2 - 0.4);
        let mut ps = ParameterSet::new();
        let id = ps.add("cb", cb.entries().clone());
        let mean_dist = |entries: &Tensor, idx: &[usize]| -> f64 {
            feats
                .data()
                .chunks(2)
                .zip(idx)
                .map(|(f, &i)| {
                    let e = &entries.data()[i * 2..i * 2 + 2];
                    (f[0] - e[0]).powi(2) + (f[1] - e[1]).powi(2)
                })
                .sum::<f64>()
                / 16.0
        };
        let mut g = Graph::new();
        let ze = g.constant(feats.clone());
        let table = g.leaf(ps.get(id).clone());
        let q = quantize_graph(&mut g, ze, table, &cb).unwrap();
        let before = mean_dist(ps.get(id), &q.indices);
        let grads = g.backward(q.loss).unwrap();
        ps.sgd_step(&[grads.get(table).unwrap().to_vec()], 0.5);
        assert!(mean_dist(ps.get(id), &q.indices) < before);
    }

    #[test]
    fn init_from_rows_copies_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cb = Codebook::random(5, 2, &mut rng).unwrap();
        cb.init_from_rows(&[1.0, 2.0, -1.0, 0.5], &mut rng).unwrap();
        assert!((cb.entry(0)[0] - 1.0).abs() < 1e-3 && (cb.entry(3)[1] - 0.5).abs() < 1e-3);
        assert_ne!(cb.entry(0), cb.entry(2));
        assert!(cb.init_from_rows(&[], &mut rng).is_err());
    }

    #[test]
    fn reseeding_replaces_unused_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cb = Codebook::random(4, 2, &mut rng).unwrap();
        cb.record_usage(&[0, 0, 2]);
        let rows = vec![9.0, 9.0];
        assert_eq!(cb.reseed_dead(&rows, &mut rng), 2);
        assert_eq!(cb.entry(1), &[9.0, 9.0]);
        assert_eq!(cb.entry(3), &[9.0, 9.0]);
        assert!(cb.usage().iter().all(|&u| u == 0));
    }

    #[test]
    fn sequence_examples() {
        let g = TokenGrid::new(2, 2, 4, vec![1, 2, 3, 0]).unwrap();
        let all = grid_to_sequence(&g, &[true; 4]).unwrap();
        assert!(all.targets().is_empty());

        let s = grid_to_sequence(&g, &[true, false, true, false]).unwrap();
        assert_eq!(s.cond(), &[1, 3]);
        assert_eq!(s.target_cells(), &[1, 3]);
        assert_eq!(s.targets(), &[2, 0]);
        assert_eq!(sequence_to_grid(&s).unwrap(), g);
    }

    proptest! {
        #[test]
        fn quantize_dequantize_round_trip(tokens in prop::collection::vec(0usize..6, 12), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::random(6, 3, &mut rng).unwrap();
            // Distinct random entries make every lookup its own nearest entry.
            let g = TokenGrid::new(3, 4, 6, tokens).unwrap();
            let f = dequantize(&g, &cb).unwrap();
            prop_assert_eq!(quantize(&f, &cb).unwrap().grid, g);
        }

        #[test]
        fn sequence_round_trip(tokens in prop::collection::vec(0usize..5, 12), known in prop::collection::vec(any::<bool>(), 12)) {
            let g = TokenGrid::new(3, 4, 5, tokens).unwrap();
            let s = grid_to_sequence(&g, &known).unwrap();
            prop_assert_eq!(s.n_cond, known.iter().filter(|&&k| k).count());
            prop_assert_eq!(sequence_to_grid(&s).unwrap(), g);
        }

        #[test]
        fn quantize_is_permutation_equivariant(seed in 0u64..500, shift in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::random(5, 2, &mut rng).unwrap();
            let feats = Tensor::from_fn(&[1, 6, 2], |_| rng.random_range(-0.3..0.3));
            let mut perm = vec![0.0; 12];
            for p in 0..6 {
                let q = (p + shift) % 6;
                perm[q * 2..q * 2 + 2].copy_from_slice(&feats.data()[p * 2..p * 2 + 2]);
            }
            let a = quantize(&feats, &cb).unwrap().grid;
            let b = quantize(&Tensor::new(&[1, 6, 2], perm).unwrap(), &cb).unwrap().grid;
            for p in 0..6 {
                prop_assert_eq!(a.tokens()[p], b.tokens()[(p + shift) % 6]);
            }
        }
    }
}
