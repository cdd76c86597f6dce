//! Model-level (global latent statistics) and sample-level (Monte-Carlo
//! over `p(u | x)`) uncertainty.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{shape_err, Error, Result};
use crate::graph::argmax;
use crate::latent::softmax;
use crate::numerics::{kde_estimate, linspace, stream_rng, ParamStore, Tensor};
use crate::model::GtnpModel;
use crate::train::TrainState;

const LOCAL_STREAM: u64 = 5 << 32;
const GLOBAL_KDE_STREAM: u64 = 6 << 32;

/// Dimension-averaged mean and variance of `q(z_global)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalRecord {
    pub epoch: usize,
    pub mean_avg: f64,
    pub var_avg: f64,
}

pub fn global_record(model: &GtnpModel, store: &ParamStore, epoch: usize) -> GlobalRecord {
    let g = model.global_distribution(store);
    let d = g.dim() as f64;
    GlobalRecord {
        epoch,
        mean_avg: g.mean.iter().sum::<f64>() / d,
        var_avg: g.variance().iter().sum::<f64>() / d,
    }
}

/// Global-latent summary at the state's current epoch.
pub fn track_global(state: &TrainState) -> GlobalRecord {
    global_record(&state.model, &state.store, state.epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalOptions {
    pub n_draws: usize,
    pub seed: u64,
    /// Replaces every log-variance of `p(u | h)` (diagnostics only).
    pub logvar_override: Option<f64>,
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions {
            n_draws: 100,
            seed: 0,
            logvar_override: None,
        }
    }
}

/// Monte-Carlo class scores of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalUncertainty {
    pub id: usize,
    pub n_draws: usize,
    /// Softmax of the per-class mean log-probability over draws.
    pub scores: Vec<f64>,
    /// Per-class variance of the drawn probabilities.
    pub variances: Vec<f64>,
    pub pred: usize,
    /// `n_draws x classes` drawn probabilities.
    pub draws: Vec<Vec<f64>>,
}

/// Resamples `u ~ p(u | h)` with `z_global` at its mean; each draw is
/// classified through the mean of `q(z | u)`.
pub fn local_uncertainty(
    model: &GtnpModel,
    store: &ParamStore,
    x: &Tensor,
    id: usize,
    options: &LocalOptions,
) -> Result<LocalUncertainty> {
    if options.n_draws == 0 {
        return Err(Error::Config("n_draws must be at least 1".into()));
    }
    let (h, w) = model.input();
    if x.shape() != [h, w] {
        return shape_err(format!("sample shape {:?}, expected [{h}, {w}]", x.shape()));
    }
    let (mean, logvar) = model.u_params(store, &x.clone().reshape(&[1, h, w, 1])?)?;
    let d = mean.cols();
    let mut rng = stream_rng(options.seed, LOCAL_STREAM.wrapping_add(id as u64));
    let mut u = Vec::with_capacity(options.n_draws * d);
    for _ in 0..options.n_draws {
        for k in 0..d {
            let lv = options.logvar_override.unwrap_or(logvar.data()[k]);
            let eps: f64 = rng.sample(StandardNormal);
            u.push(mean.data()[k] + (0.5 * lv).exp() * eps);
        }
    }
    let lp = model.log_probs_from_u(store, &Tensor::new(&[options.n_draws, d], u)?)?;
    let c = model.classes;
    let n = options.n_draws as f64;
    let mut mean_lp = vec![0.0; c];
    let mut draws = Vec::with_capacity(options.n_draws);
    for r in 0..options.n_draws {
        let row = lp.row_slice(r);
        for (m, v) in mean_lp.iter_mut().zip(row) {
            *m += v / n;
        }
        draws.push(row.iter().map(|v| v.exp()).collect::<Vec<f64>>());
    }
    let mut variances = vec![0.0; c];
    for k in 0..c {
        let mu = draws.iter().map(|d| d[k]).sum::<f64>() / n;
        variances[k] = draws.iter().map(|d| (d[k] - mu).powi(2)).sum::<f64>() / n;
    }
    let scores = softmax(&mean_lp);
    Ok(LocalUncertainty {
        id,
        n_draws: options.n_draws,
        pred: argmax(&scores),
        scores,
        variances,
        draws,
    })
}

/// CSV of the per-draw probability matrix.
pub fn draws_csv(local: &LocalUncertainty) -> String {
    let classes = local.scores.len();
    let mut out = String::from("draw");
    for k in 0..classes {
        out.push_str(&format!(",class_{k}"));
    }
    out.push('\n');
    for (i, row) in local.draws.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub n_draws: usize,
    /// Sample ids (dataset positions) that get KDE curves and draw CSVs.
    pub selected: Vec<usize>,
    pub kde_points: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            n_draws: 100,
            selected: Vec::new(),
            kde_points: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleKde {
    pub id: usize,
    /// One curve per class over probabilities in `[0, 1]`.
    pub classes: Vec<KdeCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeBlock {
    /// Density of draws from `q(z_global)`, pooled over dimensions.
    pub global: KdeCurve,
    pub samples: Vec<SampleKde>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: usize,
    pub label: usize,
    pub pred: usize,
    pub scores: Vec<f64>,
    pub variances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// How the amplitude factor enters the objective.
    pub amp_interpretation: String,
    pub global_trace: Vec<GlobalRecord>,
    pub samples: Vec<SampleRow>,
    pub kde: Option<KdeBlock>,
}

pub const AMP_INTERPRETATION: &str = "amp weights KL(q(z_global) || N(0, I)) in the objective";

/// Uncertainty report over the dataset positions `idx`. Returns the report
/// and the local analyses of the selected samples (for draw CSVs).
pub fn uncertainty_report(
    state: &TrainState,
    data: &DomainDataset,
    idx: &[usize],
    global_trace: &[GlobalRecord],
    config: &UncertaintyConfig,
    seed: u64,
) -> Result<(UncertaintyReport, Vec<LocalUncertainty>)> {
    if idx.is_empty() {
        return Err(Error::Data("uncertainty report over an empty test set".into()));
    }
    if data.shape != state.model.input() {
        return shape_err(format!("dataset samples are {:?}, model expects {:?}", data.shape, state.model.input()));
    }
    if config.kde_points < 2 {
        return Err(Error::Config("kde_points must be at least 2".into()));
    }
    let opts = LocalOptions {
        n_draws: config.n_draws,
        seed,
        logvar_override: None,
    };
    let mut samples = Vec::with_capacity(idx.len());
    let mut selected = Vec::new();
    for &i in idx {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample {i} outside {} samples", data.len())))?;
        let local = local_uncertainty(&state.model, &state.store, &s.matrix, i, &opts)?;
        samples.push(SampleRow {
            id: i,
            label: s.label,
            pred: local.pred,
            scores: local.scores.clone(),
            variances: local.variances.clone(),
        });
        if config.selected.contains(&i) {
            selected.push(local);
        }
    }
    for id in &config.selected {
        if !idx.contains(id) {
            return Err(Error::Data(format!("selected sample {id} is not in the evaluated set")));
        }
    }
    let kde = if selected.is_empty() {
        None
    } else {
        Some(KdeBlock {
            global: global_kde(state, config, seed)?,
            samples: selected
                .iter()
                .map(|l| class_kdes(l, config.kde_points))
                .collect::<Result<_>>()?,
        })
    };
    Ok((
        UncertaintyReport {
            amp_interpretation: AMP_INTERPRETATION.to_string(),
            global_trace: global_trace.to_vec(),
            samples,
            kde,
        },
        selected,
    ))
}

fn global_kde(state: &TrainState, config: &UncertaintyConfig, seed: u64) -> Result<KdeCurve> {
    let g = state.model.global_distribution(&state.store);
    let mut rng = stream_rng(seed, GLOBAL_KDE_STREAM);
    let mut draws = Vec::with_capacity(config.n_draws * g.dim());
    for _ in 0..config.n_draws {
        draws.extend(g.reparam_sample(&mut rng)?);
    }
    let sd = g.variance().iter().copied().fold(0.0, f64::max).sqrt();
    let lo = g.mean.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * sd;
    let hi = g.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * sd;
    let grid = linspace(lo, hi, config.kde_points);
    let density = kde_estimate(&draws, &grid, None)?;
    Ok(KdeCurve { grid, density })
}

fn class_kdes(local: &LocalUncertainty, points: usize) -> Result<SampleKde> {
    let grid = linspace(0.0, 1.0, points);
    let classes = (0..local.scores.len())
        .map(|k| {
            let v: Vec<f64> = local.draws.iter().map(|d| d[k]).collect();
            Ok(KdeCurve {
                grid: grid.clone(),
                density: kde_estimate(&v, &grid, None)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SampleKde { id: local.id, classes })
}
