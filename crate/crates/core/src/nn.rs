//! Parameterised layers built on the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::params::{Bound, ParamId, ParameterSet};

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(ps: &mut ParameterSet, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_normal(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let b = ps.add_zeros(&format!("{name}.b"), &[cout]);
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: PadMode) -> Result<Var> {
        g.conv2d(x, p.get(self.w), Some(p.get(self.b)), self.stride, self.pad, mode)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParameterSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_with_std(&format!("{name}.w"), &[din, dout], 0.02, rng);
        let b = ps.add_zeros(&format!("{name}.b"), &[dout]);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        g.add_row_bias(y, p.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParameterSet, name: &str, d: usize) -> Self {
        let gamma = ps.add_full(&format!("{name}.g"), &[d], 1.0);
        let beta = ps.add_zeros(&format!("{name}.b"), &[d]);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

/// Pre-norm transformer block: causal self-attention then a GELU MLP, each
/// with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub context: usize,
}

impl AttentionBlock {
    pub fn new(ps: &mut ParameterSet, name: &str, d: usize, heads: usize, context: usize, rng: &mut impl Rng) -> Self {
        assert!(d % heads == 0, "model width must divide into heads");
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), d, d, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, 4 * d, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), 4 * d, d, rng),
            heads,
            context,
        }
    }

    /// `x: [b, t, d]` with `t <= context`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("attention_block", format!("{shape:?}")));
        }
        if shape[1] > self.context {
            return Err(Error::contract(format!(
                "sequence length {} exceeds context {}; caller must window",
                shape[1], self.context
            )));
        }
        let h = self.ln1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let a = g.causal_attention(q, k, v, self.heads)?;
        let a = self.proj.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}
