//! Numerical substrate: tensors, tape-based autodiff, optimizers,
//! Gaussian primitives and kernel density estimation.

pub mod autodiff;
pub mod gaussian;
pub mod gradcheck;
pub mod kde;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use gaussian::{kl_diag_gaussians, DiagGaussian};
pub use gradcheck::gradient_check;
pub use kde::{kde_estimate, linspace, silverman_bandwidth};
pub use optim::{Method, OptimizerKind, OptimizerState};
pub use params::{Bound, Dense, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a named sub-stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
