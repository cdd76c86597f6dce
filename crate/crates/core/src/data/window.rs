use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cuts a 1-D signal into non-overlapping windows of `window` values and
/// reshapes each row-major into a `side x side` matrix. The trailing
/// remainder is discarded.
pub fn window_signal(signal: &[f64], window: usize, side: usize) -> Result<Vec<Tensor>> {
    if window == 0 || window != side * side {
        return Err(Error::Config(format!(
            "window {window} must equal side^2 = {}",
            side * side
        )));
    }
    Ok(signal
        .chunks_exact(window)
        .map(|c| Tensor::new(&[side, side], c.to_vec()).expect("window = side^2"))
        .collect())
}
