//! Central finite-difference oracle for the autodiff graph.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients of a scalar closure against central
/// differences with step [`FD_STEP`].
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over every input
/// element. The closure receives one trainable leaf per input and must be
/// deterministic.
pub fn grad_check<F>(name: &str, f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::shape("grad_check", format!("{name}: closure is not scalar-valued")));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite {
            op: name.to_string(),
            detail: format!("forward value {base}"),
        });
    }
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
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(Error::NonFinite {
                    op: name.to_string(),
                    detail: format!("input {ti} element {i}: analytic {} numeric {numeric}", analytic[i]),
                });
            }
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_and_flags_missing_gradients() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = grad_check("square", |g, v| { let y = g.square(v[0]); Ok(g.sum(y)) }, &[x.clone()]).unwrap();
        assert!(ok < 1e-8, "{ok}");
        let bad = grad_check("detached", |g, v| { let d = g.detach(v[0]); let y = g.square(d); Ok(g.sum(y)) }, &[x.clone()]).unwrap();
        assert!((bad - 1.0).abs() < 1e-6, "{bad}");
        assert!(grad_check("vector", |_, v| Ok(v[0]), &[x]).is_err());
    }
}
