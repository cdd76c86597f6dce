//! Shared CNN feature extractor, global latent variable and the per-sample
//! embedding distribution `p(u | h)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::gaussian::reparam_rows;
use crate::numerics::params::glorot;
use crate::numerics::{Bound, DiagGaussian, Dense, ParamId, ParamStore, Tape, Tensor, Var};

/// Log-variance bounds applied by every Gaussian head.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const KERNEL: usize = 3;

/// Widths of every learned representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Extractor output width.
    pub d_f: usize,
    /// Global latent width.
    pub d_g: usize,
    /// Embedding `u` width.
    pub d_u: usize,
    /// Local latent `z` width.
    pub d_z: usize,
    pub conv_channels: [usize; 2],
    pub gcn_hidden: usize,
    pub edge_hidden: usize,
    pub message_width: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_f: 48,
            d_g: 16,
            d_u: 64,
            d_z: 64,
            conv_channels: [8, 16],
            gcn_hidden: 64,
            edge_hidden: 64,
            message_width: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_f,
            self.d_g,
            self.d_u,
            self.d_z,
            self.conv_channels[0],
            self.conv_channels[1],
            self.gcn_hidden,
            self.edge_hidden,
            self.message_width,
        ];
        if all.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial size after a valid 3x3 convolution followed by 2x2 pooling.
fn conv_pool(n: usize) -> usize {
    (n + 1 - KERNEL) / 2
}

/// Two conv/ReLU/max-pool stages and a dense projection, NHWC input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub dense: Dense,
    pub input: (usize, usize),
    pub flat: usize,
}

impl FeatureExtractor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: (usize, usize),
        dims: &ModelDims,
    ) -> Result<Self> {
        let (h, w) = input;
        if h < 10 || w < 10 {
            return Err(Error::Config(format!(
                "input {h}x{w} too small for two conv/pool stages (need at least 10x10)"
            )));
        }
        let [c1, c2] = dims.conv_channels;
        let (h2, w2) = (conv_pool(conv_pool(h)), conv_pool(conv_pool(w)));
        let flat = h2 * w2 * c2;
        let k2 = KERNEL * KERNEL;
        let conv1 = (
            store.add(format!("{name}.conv1.weight"), glorot(rng, k2, c1)),
            store.add(format!("{name}.conv1.bias"), Tensor::zeros(&[c1])),
        );
        let conv2 = (
            store.add(format!("{name}.conv2.weight"), glorot(rng, k2 * c1, c2)),
            store.add(format!("{name}.conv2.bias"), Tensor::zeros(&[c2])),
        );
        let dense = Dense::new(store, rng, &format!("{name}.dense"), flat, dims.d_f);
        Ok(FeatureExtractor {
            conv1,
            conv2,
            dense,
            input,
            flat,
        })
    }

    /// `x` is `[n, h, w, 1]`; returns `[n, d_f]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let n = x.shape()[0];
        let a = x
            .conv2d(p.var(self.conv1.0), p.var(self.conv1.1), KERNEL)
            .relu()
            .max_pool2();
        let b = a
            .conv2d(p.var(self.conv2.0), p.var(self.conv2.1), KERNEL)
            .relu()
            .max_pool2();
        self.dense.forward(p, b.reshape(&[n, self.flat]))
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.input.0 || s[2] != self.input.1 || s[3] != 1 {
            return shape_err(format!(
                "extractor expects [n, {}, {}, 1], got {:?}",
                self.input.0, self.input.1, s
            ));
        }
        Ok(())
    }

    /// Features of a batch with frozen weights.
    pub fn features(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tape = Tape::new();
        let p = Bound::frozen(&tape, store);
        let out = self.forward(&p, tape.constant(x.clone()));
        Ok((*out.value()).clone())
    }
}

/// Variational `q(z_global) = N(mean, exp(logvar))`, one draw per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalLatent {
    pub mean: ParamId,
    pub logvar: ParamId,
    pub dim: usize,
}

impl GlobalLatent {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        GlobalLatent {
            mean: store.add(format!("{name}.mean"), Tensor::zeros(&[1, dim])),
            logvar: store.add(format!("{name}.logvar"), Tensor::zeros(&[1, dim])),
            dim,
        }
    }

    /// Reparameterized draw, `[1, d_g]`.
    pub fn sample<'t>(&self, p: &Bound<'t>, eps: Var<'t>) -> Var<'t> {
        reparam_rows(p.var(self.mean), p.var(self.logvar), eps)
    }

    pub fn distribution(&self, store: &ParamStore) -> DiagGaussian {
        DiagGaussian {
            mean: store.get(self.mean).data().to_vec(),
            logvar: store.get(self.logvar).data().to_vec(),
        }
    }
}

/// Dense map from `h` to the mean and clamped log-variance of `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHead {
    pub dense: Dense,
    pub d_u: usize,
}

impl EmbeddingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_h: usize, d_u: usize) -> Self {
        EmbeddingHead {
            dense: gaussian_dense(store, rng, name, d_h, d_u),
            d_u,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> (Var<'t>, Var<'t>) {
        gaussian_split(self.dense.forward(p, h), self.d_u)
    }
}

/// Dense layer producing `[mean | logvar]` of width `2d`. The logvar
/// columns start at 1% of the Glorot scale so initial variances sit near 1.
pub(crate) fn gaussian_dense<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    inputs: usize,
    d: usize,
) -> Dense {
    let dense = Dense::new(store, rng, name, inputs, 2 * d);
    let w = store.get_mut(dense.weight);
    for r in 0..inputs {
        for c in d..2 * d {
            w.data_mut()[r * 2 * d + c] *= 0.01;
        }
    }
    dense
}

/// Splits `[n, 2d]` head output into `(mean, clamped logvar)`.
pub(crate) fn gaussian_split(out: Var<'_>, d: usize) -> (Var<'_>, Var<'_>) {
    (out.cols(0, d), out.cols(d, 2 * d).clamp(LOGVAR_MIN, LOGVAR_MAX))
}

/// Row `i` of mean/logvar tensors as a distribution.
pub(crate) fn row_gaussian(mean: &Tensor, logvar: &Tensor, i: usize) -> DiagGaussian {
    DiagGaussian {
        mean: mean.row_slice(i).to_vec(),
        logvar: logvar.row_slice(i).to_vec(),
    }
}

/// The embedding stage: extractor, global latent and `p(u | h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub extractor: FeatureExtractor,
    pub global: GlobalLatent,
    pub head: EmbeddingHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Stochastic,
    Mean,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        input: (usize, usize),
        dims: &ModelDims,
    ) -> Result<Self> {
        dims.validate()?;
        let extractor = FeatureExtractor::new(store, rng, "extractor", input, dims)?;
        let global = GlobalLatent::new(store, "global", dims.d_g);
        let head = EmbeddingHead::new(store, rng, "embedding", dims.d_f + dims.d_g, dims.d_u);
        Ok(Embedding {
            extractor,
            global,
            head,
        })
    }

    pub fn h_dim(&self) -> usize {
        self.extractor.dense.outputs + self.global.dim
    }

    /// `h = [features(x) | z_g]` for every row of the batch.
    pub fn embed_vars<'t>(&self, p: &Bound<'t>, x: Var<'t>, z_g: Var<'t>) -> Var<'t> {
        let f = self.extractor.forward(p, x);
        let n = f.shape()[0];
        Var::hcat(&[f, z_g.broadcast_rows(n)])
    }

    /// `h` for a single `h x w` sample.
    pub fn embed(&self, store: &ParamStore, x: &Tensor, z_g: &[f64]) -> Result<Vec<f64>> {
        if z_g.len() != self.global.dim {
            return shape_err(format!("global latent of {} values, expected {}", z_g.len(), self.global.dim));
        }
        let (h, w) = self.extractor.input;
        if x.shape() != [h, w] {
            return shape_err(format!("sample shape {:?}, expected [{h}, {w}]", x.shape()));
        }
        let batch = x.clone().reshape(&[1, h, w, 1])?;
        let tape = Tape::new();
        let p = Bound::frozen(&tape, store);
        let zg = tape.constant(Tensor::row(z_g.to_vec()));
        let out = self.embed_vars(&p, tape.constant(batch), zg);
        Ok(out.value().data().to_vec())
    }

    pub fn u_distribution(&self, store: &ParamStore, h: &[f64]) -> Result<DiagGaussian> {
        if h.len() != self.h_dim() {
            return shape_err(format!("h has {} values, expected {}", h.len(), self.h_dim()));
        }
        let tape = Tape::new();
        let p = Bound::frozen(&tape, store);
        let (m, lv) = self.head.forward(&p, tape.constant(Tensor::row(h.to_vec())));
        Ok(row_gaussian(&m.value(), &lv.value(), 0))
    }
}

/// Draws `u` from `p(u | h)` or returns its mean.
pub fn sample_u<R: Rng>(dist: &DiagGaussian, mode: SampleMode, rng: &mut R) -> Result<Vec<f64>> {
    match mode {
        SampleMode::Mean => {
            dist.validate()?;
            Ok(dist.mean.clone())
        }
        SampleMode::Stochastic => dist.reparam_sample(rng),
    }
}
