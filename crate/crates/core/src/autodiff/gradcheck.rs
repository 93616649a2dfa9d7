//! Central finite-difference checking of reverse-mode gradients.
//!
//! The checker only ever evaluates the forward value of the function under
//! test, so it stays independent of every backward rule it verifies.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative errors of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares gradients of the scalar produced by `f` with central differences
/// of step `h` for every entry of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}
