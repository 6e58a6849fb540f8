//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Grads, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    moments: Vec<Option<Moments>>,
    step: u64,
}

/// Leaf variables for one forward pass, parallel to a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Copy with some parameters bound to other variables.
    pub fn with_override(&self, pairs: &[(ParamId, Var)]) -> Bound {
        let mut b = self.clone();
        for &(id, v) in pairs {
            b.0[id.0] = v;
        }
        b
    }

    /// Pulls each parameter's gradient out of `grads`; parameters that did
    /// not take part in the loss get zeros.
    pub fn collect(&self, grads: &mut Grads, params: &ParameterSet) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .zip(&params.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonFinitePolicy {
    SkipAndReport,
    Fail,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub non_finite: NonFinitePolicy,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4.5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            non_finite: NonFinitePolicy::SkipAndReport,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Names of parameters whose update was skipped because of a
    /// non-finite gradient.
    pub skipped: Vec<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.moments.push(None);
        ParamId(self.names.len() - 1)
    }

    /// He-normal initialised weight with the given fan-in.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.add_with_std(name, shape, std, rng)
    }

    pub fn add_with_std(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments[id.0].is_some()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Replaces tensor values by name; shapes must match.
    pub fn load_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, t) in other.iter() {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    detail: format!("unknown parameter {name}"),
                })?;
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::shape("load_from", format!("{name}: {:?} vs {:?}", self.tensors[i].shape(), t.shape())));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], cfg: &AdamConfig) -> Result<StepReport> {
        if grads.len() != self.tensors.len() {
            return Err(Error::shape("adam_step", format!("{} grads for {} params", grads.len(), self.tensors.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.tensors[i].numel() {
                return Err(Error::shape("adam_step", format!("{}: grad len {}", self.names[i], g.len())));
            }
        }
        let mut report = StepReport::default();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                match cfg.non_finite {
                    NonFinitePolicy::Fail => {
                        return Err(Error::NonFinite {
                            op: "adam_step".into(),
                            detail: format!("gradient of {}", self.names[i]),
                        })
                    }
                    NonFinitePolicy::SkipAndReport => {
                        report.skipped.push(self.names[i].clone());
                        continue;
                    }
                }
            }
            let n = g.len();
            let mo = self.moments[i].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = self.tensors[i].data_mut();
            for j in 0..n {
                mo.m[j] = cfg.beta1 * mo.m[j] + (1.0 - cfg.beta1) * g[j];
                mo.v[j] = cfg.beta2 * mo.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = mo.m[j] / bc1;
                let vhat = mo.v[j] / bc2;
                data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(report)
    }

    /// Plain gradient-descent step (used for codebook checks).
    pub fn sgd_step(&mut self, grads: &[Vec<f64>], lr: f64) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            for (v, gv) in t.data_mut().iter_mut().zip(g) {
                *v -= lr * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = ParameterSet::new();
        let id = ps.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = ps.get(id).clone();
        ps.adam_step(&[vec![0.0; 3]], &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(ps.get(id), &before);
        assert!(ps.has_moments(id));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        let mut ps = ParameterSet::new();
        let id = ps.add("w", Tensor::scalar(0.0));
        ps.adam_step(&[vec![1.0]], &AdamConfig::with_lr(0.1)).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((ps.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_policy() {
        let mut ps = ParameterSet::new();
        ps.add("a", Tensor::scalar(1.0));
        ps.add("b", Tensor::scalar(1.0));
        let rep = ps.adam_step(&[vec![f64::NAN], vec![1.0]], &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(rep.skipped, vec!["a".to_string()]);
        assert_eq!(ps.get(ParamId(0)).item(), 1.0);
        assert!(ps.get(ParamId(1)).item() < 1.0);

        let cfg = AdamConfig {
            non_finite: NonFinitePolicy::Fail,
            ..AdamConfig::with_lr(0.1)
        };
        assert!(ps.adam_step(&[vec![f64::INFINITY], vec![1.0]], &cfg).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut ps = ParameterSet::new();
            ps.add_normal("w", &[4, 4], 4, &mut rng);
            for s in 0..5 {
                let g: Vec<f64> = (0..16).map(|i| ((i * 7 + s) % 5) as f64 - 2.0).collect();
                ps.adam_step(&[g], &AdamConfig::with_lr(0.01)).unwrap();
            }
            ps.get(ParamId(0)).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
