//! Training objective: per-domain KL between estimated and real latent
//! distributions, cross-entropy, MMD alignment and the global-latent prior.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::gaussian::kl_diag_rows;
use crate::numerics::{kl_diag_gaussians, DiagGaussian, Tensor, Var};

const PROB_FLOOR: f64 = 1e-12;
const SIGMA_FLOOR: f64 = 1e-6;

/// Mean `KL(q_i || p_i)` over the batch.
pub fn distribution_loss(pairs: &[(DiagGaussian, DiagGaussian)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("distribution loss over an empty batch".into()));
    }
    let mut sum = 0.0;
    for (q, p) in pairs {
        sum += kl_diag_gaussians(q, p)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Tape form of [`distribution_loss`].
pub fn distribution_loss_vars<'t>(
    q_mean: Var<'t>,
    q_logvar: Var<'t>,
    p_mean: Var<'t>,
    p_logvar: Var<'t>,
) -> Var<'t> {
    kl_diag_rows(q_mean, q_logvar, p_mean, p_logvar).mean()
}

/// Cross-entropy of probability rows against labels, with a `1e-12` floor.
pub fn classification_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return shape_err(format!("{} probability rows for {} labels", probs.rows(), labels.len()));
    }
    let classes = probs.cols();
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} outside {classes} classes")));
        }
        sum -= probs.at(i, y).max(PROB_FLOOR).ln();
    }
    Ok(sum / labels.len() as f64)
}

/// Tape form of [`classification_loss`] on logits (log-softmax, no floor).
pub fn classification_loss_vars<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    logits.log_softmax().pick(labels).mean().neg()
}

/// Gaussian kernel bandwidth choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bandwidth", rename_all = "snake_case", deny_unknown_fields)]
pub enum MmdConfig {
    /// Median pairwise distance of the pooled batch, recomputed per call.
    Median,
    Fixed { sigma: f64 },
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig::Median
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MmdConfig::Fixed { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("MMD sigma {sigma} must be positive")))
            }
            _ => Ok(()),
        }
    }

    /// Bandwidth for the pooled rows of `us` and `ut`.
    pub fn sigma(&self, us: &Tensor, ut: &Tensor) -> f64 {
        match *self {
            MmdConfig::Fixed { sigma } => sigma,
            MmdConfig::Median => median_distance(us, ut),
        }
    }
}

/// Median pairwise Euclidean distance over distinct pairs of the pooled
/// rows, floored at `1e-6`.
pub fn median_distance(us: &Tensor, ut: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..us.rows())
        .map(|i| us.row_slice(i))
        .chain((0..ut.rows()).map(|j| ut.row_slice(j)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return SIGMA_FLOOR;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if med < SIGMA_FLOOR {
        warn!("median pairwise distance {med:e} below floor; using {SIGMA_FLOOR:e}");
        SIGMA_FLOOR
    } else {
        med
    }
}

/// The `M` matrix of the trace form: `1/n_s^2` on the source block,
/// `1/n_t^2` on the target block and `-1/(n_s n_t)` across.
pub fn mmd_weights(ns: usize, nt: usize) -> Tensor {
    let n = ns + nt;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = match (i < ns, j < ns) {
                (true, true) => 1.0 / (ns * ns) as f64,
                (false, false) => 1.0 / (nt * nt) as f64,
                _ => -1.0 / (ns * nt) as f64,
            };
        }
    }
    Tensor::new(&[n, n], m).expect("square")
}

fn check_mmd_inputs(ns: usize, nt: usize, ds: usize, dt: usize) -> Result<()> {
    if ns < 2 || nt < 2 {
        return Err(Error::Data(format!("MMD needs at least 2 rows per set, got {ns} and {nt}")));
    }
    if ds != dt {
        return shape_err(format!("MMD widths differ: {ds} vs {dt}"));
    }
    Ok(())
}

/// Biased MMD² between two sets of rows, `tr(K M)`.
pub fn mmd_loss(us: &Tensor, ut: &Tensor, config: &MmdConfig) -> Result<f64> {
    check_mmd_inputs(us.rows(), ut.rows(), us.cols(), ut.cols())?;
    config.validate()?;
    let sigma = config.sigma(us, ut);
    let mut data = us.data().to_vec();
    data.extend_from_slice(ut.data());
    let pooled = Tensor::new(&[us.rows() + ut.rows(), us.cols()], data)?;
    let n = pooled.rows();
    let m = mmd_weights(us.rows(), ut.rows());
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d: f64 = pooled
                .row_slice(i)
                .iter()
                .zip(pooled.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += (-d * inv).exp() * m.at(j, i);
        }
    }
    Ok(total)
}

/// Tape form of [`mmd_loss`] with the bandwidth held constant.
pub fn mmd_vars<'t>(us: Var<'t>, ut: Var<'t>, sigma: f64) -> Var<'t> {
    let (ns, nt) = (us.shape()[0], ut.shape()[0]);
    let pooled = Var::vcat(&[us, ut]);
    let k = pooled.sq_dist(pooled).scale(-1.0 / (2.0 * sigma * sigma)).exp();
    let m = us.tape().constant(mmd_weights(ns, nt));
    k.mul(m).sum()
}

/// Weights of the non-unit terms of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mmd: f64,
    /// Weight on `KL(q(z_global) || N(0, I))`.
    pub amp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mmd: 1.0,
            amp: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mmd", self.lambda_mmd), ("amp", self.amp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Loss weights plus the MMD bandwidth choice, as configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_mmd: f64,
    pub amp: f64,
    pub mmd: MmdConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            lambda_mmd: w.lambda_mmd,
            amp: w.amp,
            mmd: MmdConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_mmd: self.lambda_mmd,
            amp: self.amp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.mmd.validate()
    }
}

/// The six unweighted terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub dist_source: f64,
    pub dist_target: f64,
    pub cls_source: f64,
    pub cls_target: f64,
    pub mmd: f64,
    pub global_kl: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("dist_source", self.dist_source),
            ("dist_target", self.dist_target),
            ("cls_source", self.cls_source),
            ("cls_target", self.cls_target),
            ("mmd", self.mmd),
            ("global_kl", self.global_kl),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dist_source: f64,
    pub dist_target: f64,
    pub cls_source: f64,
    pub cls_target: f64,
    pub mmd: f64,
    pub global_kl: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            dist_source: self.dist_source,
            dist_target: self.dist_target,
            cls_source: self.cls_source,
            cls_target: self.cls_target,
            mmd: self.mmd,
            global_kl: self.global_kl,
        }
    }
}

pub fn weighted_total(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.dist_source
        + parts.dist_target
        + parts.cls_source
        + parts.cls_target
        + weights.lambda_mmd * parts.mmd
        + weights.amp * parts.global_kl
}

/// Combines the parts, rejecting any non-finite term by name.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    let total = weighted_total(parts, weights);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total loss = {total}")));
    }
    Ok(LossBreakdown {
        dist_source: parts.dist_source,
        dist_target: parts.dist_target,
        cls_source: parts.cls_source,
        cls_target: parts.cls_target,
        mmd: parts.mmd,
        global_kl: parts.global_kl,
        total,
        weights: *weights,
    })
}
