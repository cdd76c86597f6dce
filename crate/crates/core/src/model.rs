//! The assembled network and its deterministic inference path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, ModelDims};
use crate::error::{shape_err, Result};
use crate::graph::GcnParams;
use crate::latent::{ClassifierHead, EstDistHead, RealDistHead};
use crate::numerics::{Bound, DiagGaussian, ParamId, ParamStore, Tape, Tensor};

/// Rows per forward pass during inference.
pub(crate) const EVAL_CHUNK: usize = 128;

/// Parameter layout of the full model; the tensors live in a `ParamStore`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtnpModel {
    pub dims: ModelDims,
    pub classes: usize,
    pub embedding: Embedding,
    pub gcn: GcnParams,
    /// `tau = exp(log_tau)` of the bipartite kernel.
    pub log_tau: ParamId,
    pub real: RealDistHead,
    pub est: EstDistHead,
    pub classifier: ClassifierHead,
}

impl GtnpModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        input: (usize, usize),
        classes: usize,
        dims: &ModelDims,
    ) -> Result<Self> {
        let embedding = Embedding::new(store, rng, input, dims)?;
        let gcn = GcnParams::new(store, rng, dims.d_f, dims.gcn_hidden, dims.edge_hidden, classes);
        let log_tau = store.add("bipartite.log_tau", Tensor::zeros(&[1]));
        let real = RealDistHead::new(store, rng, dims.d_u, classes, dims.message_width, dims.d_z);
        let est = EstDistHead::new(store, rng, dims.d_u, dims.d_z);
        let classifier = ClassifierHead::new(store, rng, dims.d_z, dims.d_u, classes);
        Ok(GtnpModel {
            dims: *dims,
            classes,
            embedding,
            gcn,
            log_tau,
            real,
            est,
            classifier,
        })
    }

    pub fn input(&self) -> (usize, usize) {
        self.embedding.extractor.input
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp()
    }

    pub fn global_distribution(&self, store: &ParamStore) -> DiagGaussian {
        self.embedding.global.distribution(store)
    }

    /// Mean and logvar of `p(u | h)` for an NHWC batch, with `z_global` at
    /// its variational mean.
    pub fn u_params(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.embedding.extractor.check_input(x)?;
        let tape = Tape::new();
        let p = Bound::frozen(&tape, store);
        let zg = p.var(self.embedding.global.mean);
        let h = self.embedding.embed_vars(&p, tape.constant(x.clone()), zg);
        let (m, lv) = self.embedding.head.forward(&p, h);
        Ok(((*m.value()).clone(), (*lv.value()).clone()))
    }

    /// Class log-probabilities from `[mean q(z | u) | u]` for rows of `u`.
    pub fn log_probs_from_u(&self, store: &ParamStore, u: &Tensor) -> Result<Tensor> {
        if u.cols() != self.dims.d_u {
            return shape_err(format!("u has width {}, expected {}", u.cols(), self.dims.d_u));
        }
        let tape = Tape::new();
        let p = Bound::frozen(&tape, store);
        let uv = tape.constant(u.clone());
        let (qm, _) = self.est.forward(&p, uv);
        let lp = self.classifier.logits(&p, qm, uv).log_softmax();
        Ok((*lp.value()).clone())
    }

    /// Deterministic class probabilities for an NHWC batch `[n, h, w, 1]`.
    pub fn predict_probs(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.embedding.extractor.check_input(x)?;
        let n = x.rows();
        let mut out = Vec::with_capacity(n * self.classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let (u, _) = self.u_params(store, &x.select_rows(&idx))?;
            let lp = self.log_probs_from_u(store, &u)?;
            out.extend(lp.data().iter().map(|v| v.exp()));
        }
        Tensor::new(&[n, self.classes], out)
    }
}
