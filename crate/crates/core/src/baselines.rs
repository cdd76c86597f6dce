//! Comparison classifiers built from the same extractor and head widths:
//! source-only cross-entropy, and cross-entropy plus feature-level MMD.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::embedding::{FeatureExtractor, ModelDims};
use crate::error::{shape_err, Error, Result};
use crate::losses::{classification_loss_vars, median_distance, mmd_vars, MmdConfig};
use crate::model::EVAL_CHUNK;
use crate::numerics::{stream_rng, Bound, Dense, OptimizerKind, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::train::BatchCycler;

const INIT_STREAM: u64 = 11;
const SOURCE_STREAM: u64 = 12 << 32;
const TARGET_STREAM: u64 = 13 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    SourceOnly,
    MmdOnly,
}

impl BaselineVariant {
    pub fn name(self) -> &'static str {
        match self {
            BaselineVariant::SourceOnly => "source_only",
            BaselineVariant::MmdOnly => "mmd_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub variant: BaselineVariant,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub seed: u64,
    pub dims: ModelDims,
    pub lambda_mmd: f64,
    pub mmd: MmdConfig,
}

/// Extractor, a ReLU layer of width `d_z + d_u` and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub variant: BaselineVariant,
    pub store: ParamStore,
    pub extractor: FeatureExtractor,
    pub hidden: Dense,
    pub classifier: Dense,
    pub classes: usize,
}

impl BaselineModel {
    fn logits<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let f = self.extractor.forward(p, x);
        let h = self.hidden.forward(p, f).relu();
        (f, self.classifier.forward(p, h))
    }

    /// Class probabilities for an NHWC batch.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.check_input(x)?;
        let n = x.rows();
        let mut out = Vec::with_capacity(n * self.classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &self.store);
            let (_, logits) = self.logits(&p, tape.constant(x.select_rows(&idx)));
            out.extend(logits.log_softmax().value().data().iter().map(|v| v.exp()));
        }
        Tensor::new(&[n, self.classes], out)
    }

    pub fn predict_indices(&self, data: &DomainDataset, idx: &[usize]) -> Result<Tensor> {
        if data.shape != self.extractor.input {
            return shape_err(format!(
                "dataset samples are {:?}, model expects {:?}",
                data.shape, self.extractor.input
            ));
        }
        self.predict_probs(&data.batch(idx))
    }
}

/// Trains one baseline on the training portions of both datasets; the
/// target portion is used (unlabeled) only by `mmd_only`.
pub fn train_baseline(
    config: &BaselineConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<BaselineModel> {
    if config.batch_size < 2 {
        return Err(Error::Config("baseline batch_size must be at least 2".into()));
    }
    config.dims.validate()?;
    config.mmd.validate()?;
    if source.shape != target.shape {
        return shape_err("source and target sample shapes differ");
    }
    let s_pool = source.training_indices();
    let t_pool = target.training_indices();
    if s_pool.len() < 2 || t_pool.len() < 2 {
        return Err(Error::Data("baselines need at least 2 training samples per domain".into()));
    }
    let classes = source.class_count.max(target.class_count);
    let mut store = ParamStore::new();
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    let d = &config.dims;
    let extractor = FeatureExtractor::new(&mut store, &mut rng, "extractor", source.shape, d)?;
    let hidden = Dense::new(&mut store, &mut rng, "baseline.hidden", d.d_f, d.d_z + d.d_u);
    let classifier = Dense::new(&mut store, &mut rng, "classifier", d.d_z + d.d_u, classes);
    let mut model = BaselineModel {
        variant: config.variant,
        store,
        extractor,
        hidden,
        classifier,
        classes,
    };
    let mut opt = OptimizerState::new(config.optimizer.method(), config.learning_rate, &model.store)?;
    let b = config.batch_size;
    let steps = s_pool.len().div_ceil(b).max(t_pool.len().div_ceil(b));
    let mut s_cycle = BatchCycler::new(s_pool, config.seed, SOURCE_STREAM);
    let mut t_cycle = BatchCycler::new(t_pool, config.seed, TARGET_STREAM);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let sb = s_cycle.next(b);
            let tb = t_cycle.next(b);
            let tape = Tape::new();
            let p = Bound::trainable(&tape, &model.store);
            let (fs, logits) = model.logits(&p, tape.constant(source.batch(&sb)));
            let mut loss = classification_loss_vars(logits, &source.labels_at(&sb));
            if config.variant == BaselineVariant::MmdOnly {
                let ft = model.extractor.forward(&p, tape.constant(target.batch(&tb)));
                let sigma = match config.mmd {
                    MmdConfig::Fixed { sigma } => sigma,
                    MmdConfig::Median => median_distance(&fs.value(), &ft.value()),
                };
                loss = loss.add(mmd_vars(fs, ft, sigma).scale(config.lambda_mmd));
            }
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at epoch {epoch}", config.variant.name())));
            }
            sum += value;
            let mut grads = tape.backward(loss);
            let g = p.grads(&mut grads);
            opt.step(&mut model.store, &g)?;
        }
        info!("{} epoch {epoch}: loss {:.4}", config.variant.name(), sum / steps as f64);
    }
    Ok(model)
}
