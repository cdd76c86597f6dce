use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar from the variables recorded for `point` and is
/// evaluated once on a trainable tape plus twice per coordinate. Returns
/// the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of all inputs.
pub fn gradient_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("perturbation {h} outside [1e-7, 1e-4]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    if !out.item().is_finite() {
        return Err(Error::NonFinite("gradient check base point".into()));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradient check perturbation".into()))
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = probe[t].data()[k];
            probe[t].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[t].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
