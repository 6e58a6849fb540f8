//! Autoregressive scene model over token sequences and its samplers.
//!
//! Every sequence starts with a start element carrying the reserved token.
//! An input position holds one element (token, grid cell, segment) plus
//! the grid cell of the element it must predict next, so the same model
//! serves any ordering of cells, including the duplicated columns of the
//! circular schedule.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::error::{ensure, Error, Result};
use crate::kernels;
use crate::nn::{AttentionBlock, LayerNorm, Linear, LN_EPS};
use crate::params::{AdamConfig, Bound, ParamId, ParameterSet};
use crate::vq::{grid_to_sequence, TokenGrid, TokenSequence};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneConfig {
    pub vocab: usize,
    pub h_q: usize,
    pub w_q: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub context: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { vocab: 64, h_q: 8, w_q: 16, d_model: 128, heads: 4, blocks: 4, context: 256 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab >= 2, "vocab must be at least 2");
        ensure!(self.h_q >= 1 && self.w_q >= 2, "token grid too small");
        ensure!(self.heads >= 1 && self.d_model % self.heads == 0, "d_model must divide into heads");
        ensure!(self.blocks >= 1, "need at least one block");
        ensure!(self.context >= 2, "context too short");
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("scene.vocab", self.vocab);
        kv.set("scene.h_q", self.h_q);
        kv.set("scene.w_q", self.w_q);
        kv.set("scene.d_model", self.d_model);
        kv.set("scene.heads", self.heads);
        kv.set("scene.blocks", self.blocks);
        kv.set("scene.context", self.context);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            vocab: kv.get_or("scene.vocab", d.vocab)?,
            h_q: kv.get_or("scene.h_q", d.h_q)?,
            w_q: kv.get_or("scene.w_q", d.w_q)?,
            d_model: kv.get_or("scene.d_model", d.d_model)?,
            heads: kv.get_or("scene.heads", d.heads)?,
            blocks: kv.get_or("scene.blocks", d.blocks)?,
            context: kv.get_or("scene.context", d.context)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Segment of an input position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Start = 0,
    Cond = 1,
    Target = 2,
}

/// One element of a token sequence placed on the (original-width) grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Element {
    pub token: usize,
    pub row: usize,
    pub col: usize,
    pub seg: Segment,
}

/// Table indices for one input position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PosInput {
    token: usize,
    row: usize,
    col: usize,
    seg: usize,
    qrow: usize,
    qcol: usize,
}

#[derive(Clone, Debug)]
pub struct SceneModel {
    pub cfg: SceneConfig,
    pub params: ParameterSet,
    tok: ParamId,
    row: ParamId,
    col: ParamId,
    seg: ParamId,
    qrow: ParamId,
    qcol: ParamId,
    blocks: Vec<AttentionBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct DecodeCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn truncate(&mut self, len: usize, d: usize) {
        if len < self.len {
            for k in self.keys.iter_mut().chain(self.values.iter_mut()) {
                k.truncate(len * d);
            }
            self.len = len;
        }
    }
}

impl SceneModel {
    pub fn new(cfg: SceneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut ps = ParameterSet::new();
        let tok = ps.add_with_std("tok_emb", &[cfg.vocab + 1, d], 0.02, rng);
        let row = ps.add_with_std("row_emb", &[cfg.h_q + 1, d], 0.02, rng);
        let col = ps.add_with_std("col_emb", &[cfg.w_q + 1, d], 0.02, rng);
        let seg = ps.add_with_std("seg_emb", &[3, d], 0.02, rng);
        let qrow = ps.add_with_std("qrow_emb", &[cfg.h_q + 1, d], 0.02, rng);
        let qcol = ps.add_with_std("qcol_emb", &[cfg.w_q + 1, d], 0.02, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| AttentionBlock::new(&mut ps, &format!("block{i}"), d, cfg.heads, cfg.context, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", d);
        let head = Linear::new(&mut ps, "head", d, cfg.vocab, rng);
        Ok(Self { cfg, params: ps, tok, row, col, seg, qrow, qcol, blocks, ln_f, head })
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    fn none_row(&self) -> usize {
        self.cfg.h_q
    }

    fn none_col(&self) -> usize {
        self.cfg.w_q
    }

    fn check_element(&self, e: &Element) -> Result<()> {
        ensure!(e.token < self.cfg.vocab, "token {} out of range {}", e.token, self.cfg.vocab);
        ensure!(e.row < self.cfg.h_q && e.col < self.cfg.w_q, "cell ({}, {}) outside the token grid", e.row, e.col);
        Ok(())
    }

    /// Input positions for `elements` where position `i` predicts element
    /// `i` (or `next` for the final position).
    fn positions(&self, elements: &[Element], next: Option<(usize, usize)>) -> Result<Vec<PosInput>> {
        let mut out = Vec::with_capacity(elements.len() + 1);
        let query = |i: usize| -> (usize, usize) {
            match elements.get(i) {
                Some(e) => (e.row, e.col),
                None => next.unwrap_or((self.none_row(), self.none_col())),
            }
        };
        let (qr, qc) = query(0);
        out.push(PosInput {
            token: self.cfg.vocab,
            row: self.none_row(),
            col: self.none_col(),
            seg: Segment::Start as usize,
            qrow: qr,
            qcol: qc,
        });
        for (i, e) in elements.iter().enumerate() {
            self.check_element(e)?;
            let (qr, qc) = query(i + 1);
            out.push(PosInput { token: e.token, row: e.row, col: e.col, seg: e.seg as usize, qrow: qr, qcol: qc });
        }
        if let Some((r, c)) = next {
            ensure!(r < self.cfg.h_q && c < self.cfg.w_q, "query cell ({r}, {c}) outside the token grid");
        }
        Ok(out)
    }

    /// Logits `[b * t, vocab]` for a batch of equal-length position lists.
    fn forward_graph(&self, g: &mut Graph, p: &Bound, batch: &[Vec<PosInput>]) -> Result<Var> {
        ensure!(!batch.is_empty(), "empty batch");
        let t = batch[0].len();
        ensure!(batch.iter().all(|b| b.len() == t), "batch sequences differ in length");
        ensure!(
            t <= self.cfg.context,
            "sequence length {t} exceeds context {}; window the prefix",
            self.cfg.context
        );
        let pick = |f: fn(&PosInput) -> usize| Rc::new(batch.iter().flatten().map(f).collect::<Vec<_>>());
        let mut x = g.gather(p.get(self.tok), pick(|q| q.token))?;
        for (id, f) in [
            (self.row, (|q: &PosInput| q.row) as fn(&PosInput) -> usize),
            (self.col, |q| q.col),
            (self.seg, |q| q.seg),
            (self.qrow, |q| q.qrow),
            (self.qcol, |q| q.qcol),
        ] {
            let e = g.gather(p.get(id), pick(f))?;
            x = g.add(x, e)?;
        }
        let mut x = g.reshape(x, &[batch.len(), t, self.cfg.d_model])?;
        for b in &self.blocks {
            x = b.forward(g, p, x)?;
        }
        let x = self.ln_f.forward(g, p, x)?;
        let logits = self.head.forward(g, p, x)?;
        g.reshape(logits, &[batch.len() * t, self.cfg.vocab])
    }

    /// Logits for the element following `prefix`, whose cell is `next`.
    /// Evaluated through the full graph, without caching.
    pub fn next_token_logits(&self, prefix: &[Element], next: (usize, usize)) -> Result<Vec<f64>> {
        let pos = self.positions(prefix, Some(next))?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let logits = self.forward_graph(&mut g, &p, &[pos])?;
        let k = self.cfg.vocab;
        let data = g.value(logits).data();
        Ok(data[data.len() - k..].to_vec())
    }

    /// Feeds one position through the cached decoder and returns its logits.
    /// Attention covers at most the last `context` positions.
    fn step(&self, cache: &mut DecodeCache, pos: &PosInput) -> Vec<f64> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let ps = &self.params;
        if cache.keys.len() != self.blocks.len() {
            cache.keys = vec![Vec::new(); self.blocks.len()];
            cache.values = vec![Vec::new(); self.blocks.len()];
        }
        let row = |id: ParamId, i: usize| &ps.get(id).data()[i * d..(i + 1) * d];
        let mut x = row(self.tok, pos.token).to_vec();
        for (id, i) in [
            (self.row, pos.row),
            (self.col, pos.col),
            (self.seg, pos.seg),
            (self.qrow, pos.qrow),
            (self.qcol, pos.qcol),
        ] {
            for (a, b) in x.iter_mut().zip(row(id, i)) {
                *a += b;
            }
        }
        let linear = |l: &Linear, v: &[f64]| -> Vec<f64> {
            let (w, b) = (ps.get(l.w), ps.get(l.b));
            let n = w.shape()[1];
            let mut y = kernels::matmul(v, w.data(), 1, v.len(), n);
            for (yv, bv) in y.iter_mut().zip(b.data()) {
                *yv += bv;
            }
            y
        };
        let norm = |l: &LayerNorm, v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            kernels::layer_norm_row(v, ps.get(l.gamma).data(), ps.get(l.beta).data(), LN_EPS, &mut out);
            out
        };
        let len = cache.len + 1;
        let start = len.saturating_sub(self.cfg.context);
        let mut probs = vec![0.0; len];
        for (li, b) in self.blocks.iter().enumerate() {
            let h = norm(&b.ln1, &x);
            let q = linear(&b.q, &h);
            cache.keys[li].extend(linear(&b.k, &h));
            cache.values[li].extend(linear(&b.v, &h));
            let mut att = vec![0.0; d];
            for hd in 0..heads {
                kernels::attend_row(
                    &q[hd * dh..(hd + 1) * dh],
                    &cache.keys[li],
                    &cache.values[li],
                    d,
                    hd * dh,
                    start,
                    len,
                    &mut probs,
                    &mut att[hd * dh..(hd + 1) * dh],
                );
            }
            let a = linear(&b.proj, &att);
            for (xv, av) in x.iter_mut().zip(&a) {
                *xv += av;
            }
            let h = norm(&b.ln2, &x);
            let h: Vec<f64> = linear(&b.fc1, &h).into_iter().map(kernels::gelu).collect();
            let h = linear(&b.fc2, &h);
            for (xv, hv) in x.iter_mut().zip(&h) {
                *xv += hv;
            }
        }
        cache.len = len;
        linear(&self.head, &norm(&self.ln_f, &x))
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, meta: &mut KeyValues) {
        self.cfg.to_kv(meta);
        ck.insert_params("scene", &self.params);
    }

    pub fn from_checkpoint(ck: &Checkpoint, meta: &KeyValues) -> Result<Self> {
        let cfg = SceneConfig::from_kv(meta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        ck.load_params("scene", &mut m.params)?;
        Ok(m)
    }
}

/// Elements of a sequence on a grid of the model's width.
pub fn sequence_elements(seq: &TokenSequence) -> Vec<Element> {
    seq.tokens
        .iter()
        .zip(&seq.cells)
        .enumerate()
        .map(|(i, (&token, &cell))| Element {
            token,
            row: cell / seq.w,
            col: cell % seq.w,
            seg: if i < seq.n_cond { Segment::Cond } else { Segment::Target },
        })
        .collect()
}

fn training_inputs(model: &SceneModel, seq: &TokenSequence) -> Result<(Vec<PosInput>, Vec<Option<usize>>)> {
    ensure!(seq.n_cond < seq.len(), "sequence has no targets");
    ensure!(seq.w == model.cfg.w_q && seq.h == model.cfg.h_q, "sequence grid differs from the model grid");
    let elements = sequence_elements(seq);
    let mut pos = model.positions(&elements[..elements.len() - 1], None)?;
    let last = elements[elements.len() - 1];
    let lp = pos.last_mut().unwrap();
    lp.qrow = last.row;
    lp.qcol = last.col;
    let targets = (0..seq.len()).map(|i| (i >= seq.n_cond).then(|| seq.tokens[i])).collect();
    Ok((pos, targets))
}

fn batch_loss(model: &SceneModel, g: &mut Graph, p: &Bound, seqs: &[&TokenSequence]) -> Result<Var> {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for s in seqs {
        let (pos, t) = training_inputs(model, s)?;
        inputs.push(pos);
        targets.extend(t);
    }
    let logits = model.forward_graph(g, p, &inputs)?;
    g.cross_entropy(logits, Rc::new(targets))
}

/// Mean negative log-likelihood of the target tokens given the condition.
pub fn transformer_nll(model: &SceneModel, seq: &TokenSequence) -> Result<f64> {
    ensure!(!seq.targets().is_empty(), "nll needs at least one target token");
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let loss = batch_loss(model, &mut g, &p, &[seq])?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Abort when the loss exceeds the first loss times this factor.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, seed: 0, adam: AdamConfig::with_lr(1e-3), divergence_factor: 10.0 }
    }
}

/// Loss after every step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
}

/// Teacher-forced Adam training on the given sequences.
pub fn train_transformer(model: &mut SceneModel, data: &[TokenSequence], cfg: &TrainConfig) -> Result<TrainLog> {
    ensure!(!data.is_empty(), "transformer dataset is empty");
    ensure!(cfg.batch >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut first = None;
    for step in 0..cfg.steps {
        let picks: Vec<&TokenSequence> = (0..cfg.batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let loss = batch_loss(model, &mut g, &p, &picks)?;
        let lv = g.value(loss).item();
        let initial = *first.get_or_insert(lv);
        if !lv.is_finite() || lv > initial * cfg.divergence_factor {
            return Err(Error::Divergence { step, loss: lv, limit: initial * cfg.divergence_factor });
        }
        let mut grads = g.backward(loss)?;
        let gv = p.collect(&mut grads, &model.params);
        if !model.params.adam_step(&gv, &cfg.adam)?.skipped.is_empty() {
            log.skipped_steps += 1;
        }
        log.losses.push(lv);
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Raster,
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    TailOnly,
    BothEnds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    pub w_p: usize,
    pub schedule: Schedule,
    pub replacement: Replacement,
    pub trace: bool,
}

impl SamplerConfig {
    /// Circular schedule with `w_p = w_q / 8` (at least 1).
    pub fn for_width(w_q: usize) -> Self {
        Self {
            temperature: 1.0,
            top_k: 32,
            seed: 0,
            w_p: (w_q / 8).max(1),
            schedule: Schedule::Circular,
            replacement: Replacement::BothEnds,
            trace: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_schedule(mut self, s: Schedule) -> Self {
        self.schedule = s;
        self
    }

    pub fn validate(&self, w_q: usize) -> Result<()> {
        ensure!(self.temperature > 0.0 && self.temperature.is_finite(), "temperature must be positive");
        ensure!(self.top_k >= 1, "top_k must be at least 1");
        if self.schedule == Schedule::Circular {
            ensure!(
                self.w_p >= 1 && 2 * self.w_p <= w_q,
                "overlap width w_p = {} must satisfy 0 < w_p <= w_q / 2 = {}",
                self.w_p,
                w_q / 2
            );
        }
        Ok(())
    }
}

/// One sampled position.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub row: usize,
    /// Column in the grid being sampled (extended grid for circular).
    pub col: usize,
    pub token: usize,
    /// Entropy (nats) of the distribution the token was drawn from.
    pub entropy: f64,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        format!("row={} col={} token={} entropy={:.6}", self.row, self.col, self.token, self.entropy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub grid: TokenGrid,
    /// Final extended grid (circular schedule only).
    pub extended: Option<TokenGrid>,
    pub trace: Vec<TraceRecord>,
}

/// Draws from temperature-scaled top-k softmax; returns (token, entropy).
pub fn sample_logits(logits: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> (usize, f64) {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(logits.len()));
    let mut p: Vec<f64> = order.iter().map(|&i| logits[i] / temperature).collect();
    kernels::softmax_in_place(&mut p);
    let entropy = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    if order.len() == 1 {
        return (order[0], entropy);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return (order[i], entropy);
        }
    }
    (order[order.len() - 1], entropy)
}

/// Sampling state over a working grid whose column `c` maps to model
/// column `col_map[c]`.
struct Run<'a> {
    model: &'a SceneModel,
    work: TokenGrid,
    col_map: Vec<usize>,
    cells: Vec<usize>,
    n_cond: usize,
    cache: DecodeCache,
    fed: usize,
}

impl<'a> Run<'a> {
    fn new(model: &'a SceneModel, work: TokenGrid, col_map: Vec<usize>) -> Result<Self> {
        let seq = grid_to_sequence(&work, &work.known_mask())?;
        Ok(Self { model, col_map, cells: seq.cells, n_cond: seq.n_cond, work, cache: DecodeCache::default(), fed: 0 })
    }

    fn cell(&self, i: usize) -> (usize, usize) {
        let c = self.cells[i];
        (c / self.work.width(), c % self.work.width())
    }

    fn model_cell(&self, i: usize) -> (usize, usize) {
        let (r, c) = self.cell(i);
        (r, self.col_map[c])
    }

    /// Position `p` input: element `p - 1` (or start) querying element `p`.
    fn position(&self, p: usize) -> PosInput {
        let cfg = &self.model.cfg;
        let (qrow, qcol) = if p < self.cells.len() { self.model_cell(p) } else { (cfg.h_q, cfg.w_q) };
        if p == 0 {
            return PosInput { token: cfg.vocab, row: cfg.h_q, col: cfg.w_q, seg: Segment::Start as usize, qrow, qcol };
        }
        let (r, c) = self.cell(p - 1);
        let (_, mc) = self.model_cell(p - 1);
        let seg = if p - 1 < self.n_cond { Segment::Cond } else { Segment::Target };
        PosInput { token: self.work.get(r, c), row: r, col: mc, seg: seg as usize, qrow, qcol }
    }

    /// Logits predicting element `i`.
    fn logits_for(&mut self, i: usize) -> Vec<f64> {
        let mut out = Vec::new();
        while self.fed <= i {
            let pos = self.position(self.fed);
            out = self.model.step(&mut self.cache, &pos);
            self.fed += 1;
        }
        out
    }

    /// Marks element `i` as changed so it is re-fed.
    fn invalidate_from(&mut self, i: usize) {
        let keep = (i + 1).min(self.fed);
        self.cache.truncate(keep, self.model.cfg.d_model);
        self.fed = keep;
    }

    fn element_index(&self, r: usize, c: usize) -> usize {
        let cell = r * self.work.width() + c;
        self.cells.iter().position(|&x| x == cell).expect("cell in sequence")
    }
}

fn check_grid(model: &SceneModel, grid: &TokenGrid) -> Result<()> {
    ensure!(
        grid.height() == model.cfg.h_q && grid.width() == model.cfg.w_q && grid.vocab() == model.cfg.vocab,
        "grid {}x{} (vocab {}) does not match the model",
        grid.height(),
        grid.width(),
        grid.vocab()
    );
    Ok(())
}

/// Row-major sampling of the unknown cells, `after_row` running once all
/// unknown cells of a row have been drawn.
fn sample_run(
    run: &mut Run,
    cfg: &SamplerConfig,
    mut after_row: impl FnMut(&mut Run, usize) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let n = run.cells.len();
    for i in run.n_cond..n {
        let logits = run.logits_for(i);
        let (token, entropy) = sample_logits(&logits, cfg.temperature, cfg.top_k, &mut rng);
        let (r, c) = run.cell(i);
        run.work.set(r, c, token);
        if cfg.trace {
            trace.push(TraceRecord { row: r, col: c, token, entropy });
        }
        if i + 1 == n || run.cell(i + 1).0 != r {
            after_row(run, r)?;
        }
    }
    Ok(trace)
}

/// Raster-order sampling of the unknown cells; known cells are kept.
pub fn sample_raster(model: &SceneModel, grid: &TokenGrid, cfg: &SamplerConfig) -> Result<Sampled> {
    check_grid(model, grid)?;
    cfg.validate(grid.width())?;
    let mut run = Run::new(model, grid.clone(), (0..grid.width()).collect())?;
    let trace = sample_run(&mut run, cfg, |_, _| Ok(()))?;
    let out = run.work;
    ensure_known_kept(grid, &out)?;
    Ok(Sampled { grid: out, extended: None, trace })
}

fn ensure_known_kept(input: &TokenGrid, out: &TokenGrid) -> Result<()> {
    for (a, b) in input.tokens().iter().zip(out.tokens()) {
        if *a < input.vocab() && a != b {
            return Err(Error::contract("sampler modified a known token"));
        }
    }
    if !out.is_complete() {
        return Err(Error::contract("sampler left unknown tokens"));
    }
    Ok(())
}

/// `[last w_p cols | grid | first w_p cols]`.
pub fn extend_grid(grid: &TokenGrid, w_p: usize) -> Result<TokenGrid> {
    let (h, w) = (grid.height(), grid.width());
    ensure!(w_p >= 1 && 2 * w_p <= w, "overlap width {w_p} out of range for width {w}");
    let we = w + 2 * w_p;
    let mut t = Vec::with_capacity(h * we);
    for r in 0..h {
        for e in 0..we {
            t.push(grid.get(r, (e + w - w_p) % w));
        }
    }
    TokenGrid::new(h, we, grid.vocab(), t)
}

/// Circular inference: sample the wrap-extended grid row by row and after
/// each row overwrite the duplicated end columns of the original-width row
/// with their overlap estimates.
pub fn sample_circular(model: &SceneModel, grid: &TokenGrid, cfg: &SamplerConfig) -> Result<Sampled> {
    check_grid(model, grid)?;
    cfg.validate(grid.width())?;
    let (w, w_p) = (grid.width(), cfg.w_p);
    let ext = extend_grid(grid, w_p)?;
    let col_map = (0..ext.width()).map(|e| (e + w - w_p) % w).collect();
    let mut run = Run::new(model, ext, col_map)?;
    let policy = cfg.replacement;
    let trace = sample_run(&mut run, cfg, |run, r| {
        let mut pairs = Vec::new();
        for j in 0..w_p {
            // Main column j takes the trailing-extension estimate.
            pairs.push((w_p + j, w_p + w + j));
            if policy == Replacement::BothEnds {
                // Main column w - w_p + j takes the leading-extension estimate.
                pairs.push((w + j, j));
            }
        }
        let mut first_changed = None;
        for (dst, src) in pairs {
            if grid.is_unknown(r, (dst + w - w_p) % w) {
                let v = run.work.get(r, src);
                if run.work.get(r, dst) != v {
                    run.work.set(r, dst, v);
                    let idx = run.element_index(r, dst);
                    first_changed = Some(first_changed.map_or(idx, |f: usize| f.min(idx)));
                }
            }
        }
        if let Some(i) = first_changed {
            run.invalidate_from(i);
        }
        Ok(())
    })?;
    let work = run.work;
    for r in 0..grid.height() {
        for j in 0..w_p {
            if work.get(r, w_p + j) != work.get(r, w_p + w + j) {
                return Err(Error::contract(format!("row {r}: replaced column {j} differs from its overlap estimate")));
            }
        }
    }
    let mut out = TokenGrid::unknown(grid.height(), w, grid.vocab());
    for r in 0..grid.height() {
        for c in 0..w {
            out.set(r, c, work.get(r, c + w_p));
        }
    }
    ensure_known_kept(grid, &out)?;
    Ok(Sampled { grid: out, extended: Some(work), trace })
}

/// Dispatches on `cfg.schedule`.
pub fn sample(model: &SceneModel, grid: &TokenGrid, cfg: &SamplerConfig) -> Result<Sampled> {
    match cfg.schedule {
        Schedule::Raster => sample_raster(model, grid, cfg),
        Schedule::Circular => sample_circular(model, grid, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    fn tiny(vocab: usize, h: usize, w: usize, context: usize, seed: u64) -> SceneModel {
        let cfg = SceneConfig { vocab, h_q: h, w_q: w, d_model: 8, heads: 2, blocks: 2, context };
        SceneModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_grid(h: usize, w: usize, vocab: usize, rng: &mut impl Rng, p_known: f64) -> (TokenGrid, Vec<bool>) {
        let full = TokenGrid::new(h, w, vocab, (0..h * w).map(|_| rng.random_range(0..vocab)).collect()).unwrap();
        let known: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p_known)).collect();
        (full.masked(&known).unwrap(), known)
    }

    fn elements_of(tokens: &[(usize, usize, usize)]) -> Vec<Element> {
        tokens.iter().map(|&(t, r, c)| Element { token: t, row: r, col: c, seg: Segment::Cond }).collect()
    }

    #[test]
    fn logits_are_deterministic_and_causal() {
        let m = tiny(6, 2, 4, 16, 1);
        let prefix = elements_of(&[(1, 0, 0), (2, 0, 1), (3, 0, 2)]);
        let a = m.next_token_logits(&prefix[..2], (0, 2)).unwrap();
        assert_eq!(a, m.next_token_logits(&prefix[..2], (0, 2)).unwrap());

        // Logits at earlier positions do not depend on later elements.
        let pos_short = m.positions(&prefix[..2], Some((0, 2))).unwrap();
        let mut pos_long = m.positions(&prefix, Some((0, 3))).unwrap();
        pos_long.truncate(3);
        let eval = |pos: Vec<PosInput>| {
            let mut g = Graph::new();
            let p = m.params.bind_frozen(&mut g);
            let l = m.forward_graph(&mut g, &p, &[pos]).unwrap();
            g.value(l).data().to_vec()
        };
        assert_eq!(eval(pos_short), eval(pos_long));
    }

    #[test]
    fn overflow_requires_windowing() {
        let m = tiny(4, 2, 4, 3, 2);
        let prefix = elements_of(&[(1, 0, 0), (2, 0, 1), (3, 0, 2)]);
        assert!(m.next_token_logits(&prefix, (0, 3)).is_err());
        assert!(m.next_token_logits(&prefix[..2], (0, 2)).is_ok());
    }

    #[test]
    fn cached_decoding_matches_graph() {
        let m = tiny(5, 2, 4, 16, 3);
        let prefix = elements_of(&[(4, 1, 2), (0, 0, 0), (3, 1, 3), (2, 0, 3)]);
        let pos = m.positions(&prefix, Some((1, 0))).unwrap();
        let mut cache = DecodeCache::default();
        let mut last = Vec::new();
        for p in &pos {
            last = m.step(&mut cache, p);
        }
        assert_eq!(last, m.next_token_logits(&prefix, (1, 0)).unwrap());

        // Truncating and re-feeding reproduces the same logits.
        cache.truncate(2, m.cfg.d_model);
        for p in &pos[2..] {
            last = m.step(&mut cache, p);
        }
        assert_eq!(last, m.next_token_logits(&prefix, (1, 0)).unwrap());
    }

    fn uniform_model(vocab: usize) -> SceneModel {
        let mut m = tiny(vocab, 2, 4, 16, 4);
        let (w, b) = m.head_ids();
        m.params.get_mut(w).data_mut().fill(0.0);
        m.params.get_mut(b).data_mut().fill(0.0);
        m
    }

    #[test]
    fn uniform_model_nll_is_ln_k() {
        let m = uniform_model(64);
        let g = TokenGrid::new(2, 4, 64, vec![3, 9, 63, 0, 1, 2, 5, 7]).unwrap();
        let seq = grid_to_sequence(&g, &[true, false, true, false, false, true, true, false]).unwrap();
        let nll = transformer_nll(&m, &seq).unwrap();
        assert!((nll - 64f64.ln()).abs() < 1e-12);
        assert!((nll - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn certain_model_nll_is_zero() {
        let mut m = uniform_model(8);
        let (_, b) = m.head_ids();
        m.params.get_mut(b).data_mut()[5] = 1000.0;
        let g = TokenGrid::new(2, 4, 8, vec![1, 5, 2, 5, 5, 5, 3, 5]).unwrap();
        let seq = grid_to_sequence(&g, &[true, false, true, false, false, false, true, false]).unwrap();
        assert_eq!(transformer_nll(&m, &seq).unwrap(), 0.0);
    }

    #[test]
    fn nll_requires_targets() {
        let m = uniform_model(8);
        let g = TokenGrid::new(2, 4, 8, vec![1; 8]).unwrap();
        let seq = grid_to_sequence(&g, &[true; 8]).unwrap();
        assert!(transformer_nll(&m, &seq).is_err());
    }

    #[test]
    fn nll_gradient_check() {
        let m = tiny(4, 2, 2, 8, 5);
        let g0 = TokenGrid::new(2, 2, 4, vec![1, 3, 0, 2]).unwrap();
        let seq = grid_to_sequence(&g0, &[true, false, false, true]).unwrap();
        let (pos, targets) = training_inputs(&m, &seq).unwrap();
        let targets = Rc::new(targets);
        let head = m.params.id("head.w").unwrap();
        let qw = m.params.id("block0.q.w").unwrap();
        let tok = m.params.id("tok_emb").unwrap();
        let inputs = [m.params.get(head).clone(), m.params.get(qw).clone(), m.params.get(tok).clone()];
        let err = grad_check(
            "scene_nll",
            |g, vars| {
                let p = m.params.bind_frozen(g);
                let p = p.with_override(&[(head, vars[0]), (qw, vars[1]), (tok, vars[2])]);
                let logits = m.forward_graph(g, &p, &[pos.clone()])?;
                g.cross_entropy(logits, targets.clone())
            },
            &inputs,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    /// Two-state language: every row alternates between two tokens, phase
    /// chosen per grid.
    fn two_state_data(n: usize, h: usize, w: usize, vocab: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let phase = rng.random_range(0..2usize);
                let toks = (0..h * w).map(|i| (i / w + i % w + phase) % 2).collect();
                let g = TokenGrid::new(h, w, vocab, toks).unwrap();
                let known: Vec<bool> = (0..h * w).map(|i| i % w < 2).collect();
                grid_to_sequence(&g, &known).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_reduces_nll_and_is_deterministic() {
        let data = two_state_data(16, 2, 4, 4, 0);
        let cfg = TrainConfig { steps: 200, batch: 4, seed: 7, ..Default::default() };
        let mut a = tiny(4, 2, 4, 16, 9);
        let before: f64 = data.iter().map(|s| transformer_nll(&a, s).unwrap()).sum();
        let log = train_transformer(&mut a, &data, &cfg).unwrap();
        let after: f64 = data.iter().map(|s| transformer_nll(&a, s).unwrap()).sum();
        assert!(after < 0.8 * before, "{before} -> {after}");
        assert_eq!(log.losses.len(), 200);

        let mut b = tiny(4, 2, 4, 16, 9);
        train_transformer(&mut b, &data, &cfg).unwrap();
        let digest = |m: &SceneModel| {
            let mut ck = Checkpoint::new();
            let mut kv = KeyValues::new();
            m.to_checkpoint(&mut ck, &mut kv);
            ck.set_meta(&kv.to_text());
            ck.digest()
        };
        assert_eq!(digest(&a), digest(&b));

        let mut c = tiny(4, 2, 4, 16, 9);
        let untouched = c.params.clone();
        train_transformer(&mut c, &data, &TrainConfig { steps: 0, ..cfg }).unwrap();
        assert!(c.params.iter().zip(untouched.iter()).all(|(x, y)| x.1 == y.1));
        assert!(train_transformer(&mut c, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(5, 2, 4, 16, 12);
        let mut ck = Checkpoint::new();
        let mut kv = KeyValues::new();
        m.to_checkpoint(&mut ck, &mut kv);
        let back = SceneModel::from_checkpoint(&ck, &kv).unwrap();
        let prefix = elements_of(&[(1, 0, 0)]);
        assert_eq!(m.next_token_logits(&prefix, (0, 1)).unwrap(), back.next_token_logits(&prefix, (0, 1)).unwrap());
    }

    #[test]
    fn sampler_examples() {
        let m = tiny(6, 2, 8, 64, 13);
        let full = TokenGrid::new(2, 8, 6, (0..16).map(|i| i % 6).collect()).unwrap();
        for sched in [Schedule::Raster, Schedule::Circular] {
            let cfg = SamplerConfig::for_width(8).with_schedule(sched);
            assert_eq!(sample(&m, &full, &cfg).unwrap().grid, full);
        }

        let unknown = TokenGrid::unknown(2, 8, 6);
        let greedy = |seed| SamplerConfig { top_k: 1, ..SamplerConfig::for_width(8).with_seed(seed) };
        for sched in [Schedule::Raster, Schedule::Circular] {
            let a = sample(&m, &unknown, &greedy(1).with_schedule(sched)).unwrap();
            let b = sample(&m, &unknown, &greedy(2).with_schedule(sched)).unwrap();
            assert_eq!(a.grid, b.grid);
        }

        let c = SamplerConfig { w_p: 2, ..SamplerConfig::for_width(8) };
        let s = sample_circular(&m, &unknown, &c).unwrap();
        assert_eq!(s.extended.as_ref().unwrap().width(), 12);
        assert_eq!(s.grid.width(), 8);
        assert!(sample_circular(&m, &unknown, &SamplerConfig { w_p: 5, ..c.clone() }).is_err());
        assert!(sample_circular(&m, &unknown, &SamplerConfig { w_p: 0, ..c.clone() }).is_err());
        assert!(sample_raster(&m, &unknown, &SamplerConfig { temperature: 0.0, ..c }).is_err());
    }

    #[test]
    fn trace_records_every_sampled_position() {
        let m = tiny(6, 2, 8, 64, 14);
        let (grid, known) = random_grid(2, 8, 6, &mut ChaCha8Rng::seed_from_u64(1), 0.3);
        let cfg = SamplerConfig { trace: true, ..SamplerConfig::for_width(8).with_schedule(Schedule::Raster) };
        let s = sample_raster(&m, &grid, &cfg).unwrap();
        assert_eq!(s.trace.len(), known.iter().filter(|&&k| !k).count());
        assert!(s.trace.iter().all(|t| t.entropy >= 0.0 && s.grid.get(t.row, t.col) == t.token));
        assert!(s.trace[0].to_line().starts_with("row="));
    }

    #[test]
    fn windowed_sampling_runs_past_context() {
        let m = tiny(4, 3, 8, 6, 15);
        let s = sample_raster(&m, &TokenGrid::unknown(3, 8, 4), &SamplerConfig::for_width(8).with_seed(3)).unwrap();
        assert!(s.grid.is_complete());
    }

    #[test]
    fn sample_logits_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.0, 5.0, 5.0, -1.0];
        assert_eq!(sample_logits(&logits, 1.0, 1, &mut rng).0, 1);
        for _ in 0..50 {
            let (t, _) = sample_logits(&logits, 1.0, 2, &mut rng);
            assert!(t == 1 || t == 2);
        }
        let (_, h) = sample_logits(&[1.0, 1.0], 1.0, 2, &mut rng);
        assert!((h - 2f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn samplers_keep_known_tokens(seed in 0u64..10_000, p_known in 0.0f64..1.0, w_p in 1usize..=4, tail in any::<bool>()) {
            let m = tiny(5, 2, 8, 64, 16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (grid, known) = random_grid(2, 8, 5, &mut rng, p_known);
            let replacement = if tail { Replacement::TailOnly } else { Replacement::BothEnds };
            let cfg = SamplerConfig { w_p, replacement, ..SamplerConfig::for_width(8).with_seed(seed) };
            for out in [sample_raster(&m, &grid, &cfg).unwrap(), sample_circular(&m, &grid, &cfg).unwrap()] {
                prop_assert!(out.grid.is_complete());
                for (i, &k) in known.iter().enumerate() {
                    if k {
                        prop_assert_eq!(out.grid.tokens()[i], grid.tokens()[i]);
                    }
                }
            }
            let c = sample_circular(&m, &grid, &cfg).unwrap();
            let ext = c.extended.unwrap();
            for r in 0..2 {
                for j in 0..w_p {
                    prop_assert_eq!(c.grid.get(r, j), ext.get(r, 8 + w_p + j));
                }
            }
        }
    }
}
