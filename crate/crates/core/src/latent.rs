//! Graph-conditioned "real" distribution `p(z | .)`, amortized "estimated"
//! distribution `q(z | u)` and the classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{gaussian_dense, gaussian_split, row_gaussian};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Bound, Dense, DiagGaussian, ParamStore, Tape, Tensor, Var};

/// Message network over `[u_j | onehot(y_j)]` plus the output network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealDistHead {
    pub message: Dense,
    pub output: Dense,
    pub classes: usize,
    pub d_z: usize,
}

impl RealDistHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d_u: usize,
        classes: usize,
        width: usize,
        d_z: usize,
    ) -> Self {
        RealDistHead {
            message: Dense::new(store, rng, "real.message", d_u + classes, width),
            output: gaussian_dense(store, rng, "real.output", width, d_z),
            classes,
            d_z,
        }
    }

    /// One message per reference node, `[n_r, width]`.
    pub fn messages<'t>(&self, p: &Bound<'t>, u_r: Var<'t>, onehot: Var<'t>) -> Var<'t> {
        self.message.forward(p, Var::hcat(&[u_r, onehot])).relu()
    }

    /// Mean and logvar for each row of `weights` (`[n, n_r]`, rows summing
    /// to one).
    pub fn forward<'t>(&self, p: &Bound<'t>, weights: Var<'t>, messages: Var<'t>) -> (Var<'t>, Var<'t>) {
        let agg = weights.matmul(messages);
        gaussian_split(self.output.forward(p, agg), self.d_z)
    }
}

/// Dense map from `u` to `(mean, logvar)` of `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstDistHead {
    pub dense: Dense,
    pub d_z: usize,
}

impl EstDistHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_u: usize, d_z: usize) -> Self {
        EstDistHead {
            dense: gaussian_dense(store, rng, "est", d_u, d_z),
            d_z,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, u: Var<'t>) -> (Var<'t>, Var<'t>) {
        gaussian_split(self.dense.forward(p, u), self.d_z)
    }
}

/// Logits from `[z | u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub dense: Dense,
}

impl ClassifierHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_z: usize, d_u: usize, classes: usize) -> Self {
        ClassifierHead {
            dense: Dense::new(store, rng, "classifier", d_z + d_u, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.dense.outputs
    }

    pub fn logits<'t>(&self, p: &Bound<'t>, z: Var<'t>, u: Var<'t>) -> Var<'t> {
        self.dense.forward(p, Var::hcat(&[z, u]))
    }
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} outside {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// `p(z_i | .)` from one row of neighbor weights over the reference set.
/// The row is normalized to sum to one; an all-zero row falls back to
/// uniform weights.
pub fn real_distribution(
    store: &ParamStore,
    head: &RealDistHead,
    weights: &[f64],
    u_r: &Tensor,
    y_r: &[usize],
) -> Result<DiagGaussian> {
    let n = y_r.len();
    if n == 0 {
        return Err(Error::Data("real distribution needs a non-empty reference set".into()));
    }
    if weights.len() != n || u_r.rows() != n {
        return shape_err(format!(
            "{} weights and {} embeddings for {n} reference labels",
            weights.len(),
            u_r.rows()
        ));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Data("neighbor weights must be finite and non-negative".into()));
    }
    let tape = Tape::new();
    let p = Bound::frozen(&tape, store);
    let msg = head.messages(
        &p,
        tape.constant(u_r.clone()),
        tape.constant(one_hot(y_r, head.classes)?),
    );
    let w = tape.constant(Tensor::row(weights.to_vec())).row_normalize();
    let (m, lv) = head.forward(&p, w, msg);
    Ok(row_gaussian(&m.value(), &lv.value(), 0))
}

/// `q(z | u)` for a single embedding.
pub fn estimated_distribution(store: &ParamStore, head: &EstDistHead, u: &[f64]) -> Result<DiagGaussian> {
    if u.len() != head.dense.inputs {
        return shape_err(format!("u has {} values, expected {}", u.len(), head.dense.inputs));
    }
    let tape = Tape::new();
    let p = Bound::frozen(&tape, store);
    let (m, lv) = head.forward(&p, tape.constant(Tensor::row(u.to_vec())));
    Ok(row_gaussian(&m.value(), &lv.value(), 0))
}

/// Class probabilities `softmax(FC([z | u]))`.
pub fn classify(store: &ParamStore, head: &ClassifierHead, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if z.len() + u.len() != head.dense.inputs {
        return shape_err(format!(
            "classifier expects {} inputs, got {}",
            head.dense.inputs,
            z.len() + u.len()
        ));
    }
    let tape = Tape::new();
    let p = Bound::frozen(&tape, store);
    let logits = head.logits(
        &p,
        tape.constant(Tensor::row(z.to_vec())),
        tape.constant(Tensor::row(u.to_vec())),
    );
    Ok(softmax(logits.value().data()))
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
