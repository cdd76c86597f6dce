//! End-to-end experiment driver: data preparation, GTNP training, baselines,
//! evaluation and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_baseline, BaselineConfig, BaselineVariant};
use crate::checkpoint::save_checkpoint;
use crate::data::{load_dataset, save_dataset, synth_generate, DomainDataset, SynthConfig};
use crate::embedding::ModelDims;
use crate::error::{Error, Result};
use crate::graph::argmax;
use crate::losses::LossConfig;
use crate::metrics::{compute_metrics_for, roc_auc, Metrics, RocCurve};
use crate::numerics::Tensor;
use crate::report::Provenance;
use crate::train::{fit, EpochRecord, TrainConfig, TrainSchedule, TrainState, TrainTrace};
use crate::uncertainty::{draws_csv, uncertainty_report, GlobalRecord, UncertaintyConfig, AMP_INTERPRETATION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate both domains instead of loading them.
    pub synth: Option<SynthConfig>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub source_test_fraction: f64,
    /// Target samples kept for training; the rest form the target test set.
    /// When absent the source test fraction applies.
    pub target_train_count: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: Some(SynthConfig::default()),
            source: None,
            target: None,
            source_test_fraction: 0.2,
            target_train_count: Some(600),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelDims,
    pub train: TrainSchedule,
    pub losses: LossConfig,
    pub uncertainty: UncertaintyConfig,
    pub baselines: Vec<BaselineVariant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelDims::default(),
            train: TrainSchedule::default(),
            losses: LossConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            baselines: vec![BaselineVariant::SourceOnly, BaselineVariant::MmdOnly],
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synth, &d.source, &d.target) {
            (Some(s), None, None) => s.validate()?,
            (None, Some(_), Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "data needs either a synth block or both source and target paths".into(),
                ))
            }
        }
        if !(d.source_test_fraction > 0.0 && d.source_test_fraction < 1.0) {
            return Err(Error::Config(format!("source_test_fraction {}", d.source_test_fraction)));
        }
        if self.uncertainty.n_draws == 0 {
            return Err(Error::Config("uncertainty.n_draws must be positive".into()));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            schedule: self.train.clone(),
            dims: self.model,
            losses: self.losses.clone(),
        }
    }

    pub fn baseline_config(&self, variant: BaselineVariant) -> BaselineConfig {
        BaselineConfig {
            variant,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            epochs: self.train.epochs,
            seed: self.seed,
            dims: self.model,
            lambda_mmd: self.losses.lambda_mmd,
            mmd: self.losses.mmd,
        }
    }

    /// Provenance stamp; the output directory is not part of the hash, so
    /// the same experiment written to two places stamps identically.
    pub fn provenance(&self) -> Provenance {
        let mut hashed = self.clone();
        hashed.output_dir = PathBuf::new();
        Provenance::new(&hashed, self.seed)
    }

    /// Raw (unsplit, unnormalized) source and target datasets.
    pub fn raw_datasets(&self) -> Result<(DomainDataset, DomainDataset)> {
        match &self.data.synth {
            Some(s) => synth_generate(s),
            None => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                Ok((load_dataset(&path(&self.data.source))?, load_dataset(&path(&self.data.target))?))
            }
        }
    }

    /// Seeded train/test splits followed by per-dataset normalization fitted
    /// on each training portion.
    pub fn datasets(&self) -> Result<(DomainDataset, DomainDataset)> {
        let (mut source, mut target) = self.raw_datasets()?;
        let d = &self.data;
        let s_test = (source.len() as f64 * d.source_test_fraction).round() as usize;
        let t_test = match d.target_train_count {
            Some(n) if n >= target.len() => {
                return Err(Error::Data(format!(
                    "target_train_count {n} leaves no test samples out of {}",
                    target.len()
                )))
            }
            Some(n) => target.len() - n,
            None => (target.len() as f64 * d.source_test_fraction).round() as usize,
        };
        source.split_train_test(s_test, self.seed)?;
        target.split_train_test(t_test, self.seed)?;
        source.normalize()?;
        target.normalize()?;
        Ok((source, target))
    }
}

/// Evaluation of one model on one dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub n: usize,
    pub metrics: Metrics,
    /// One-vs-rest AUC per class; classes absent from the split are skipped.
    pub auc: BTreeMap<usize, f64>,
}

pub fn evaluate_probs(probs: &Tensor, labels: &[usize], classes: usize) -> Result<(DomainMetrics, Vec<RocCurve>)> {
    if labels.is_empty() {
        return Err(Error::Data("evaluation over an empty set".into()));
    }
    let pred: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row_slice(i))).collect();
    let metrics = compute_metrics_for(&pred, labels, classes)?;
    let roc = roc_auc(probs, labels)?;
    let auc = roc.iter().map(|r| (r.class, r.auc)).collect();
    Ok((
        DomainMetrics {
            n: labels.len(),
            metrics,
            auc,
        },
        roc,
    ))
}

/// Positions evaluated by default: the test split, or every sample when the
/// dataset carries no split.
pub fn evaluation_indices(data: &DomainDataset) -> Vec<usize> {
    let test = data.test_indices();
    if test.is_empty() {
        (0..data.len()).collect()
    } else {
        test
    }
}

/// Evaluates a trained state on `data`.
pub fn evaluate_state(state: &TrainState, data: &DomainDataset) -> Result<(DomainMetrics, Vec<RocCurve>)> {
    let idx = evaluation_indices(data);
    if idx.is_empty() {
        return Err(Error::Data("dataset has no samples".into()));
    }
    let probs = state.predict_indices(data, &idx)?;
    evaluate_probs(&probs, &data.labels_at(&idx), state.model.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtnpMetrics {
    pub source: DomainMetrics,
    pub target: DomainMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub amp_interpretation: String,
    pub gtnp: GtnpMetrics,
    /// Target-test metrics of each baseline.
    pub baselines: BTreeMap<String, DomainMetrics>,
    /// Target-test accuracy of every model, for quick comparison.
    pub target_accuracy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochsReport {
    pub provenance: Provenance,
    pub epochs: Vec<EpochRecord>,
    pub global: Vec<GlobalRecord>,
    pub gcn: crate::graph::GcnTrace,
    pub gcn_on_reference: bool,
}

/// Everything a run produced, kept in memory for callers and tests.
pub struct ExperimentOutcome {
    pub state: TrainState,
    pub trace: TrainTrace,
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub metrics: MetricsReport,
}

pub(crate) fn comment_line(p: &Provenance) -> String {
    format!("# config_hash={} seed={}\n", p.config_hash, p.seed)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_roc(out: &Path, prefix: &str, curves: &[RocCurve], p: &Provenance) -> Result<()> {
    for c in curves {
        write(out.join(format!("roc_{prefix}_class{}.csv", c.class)), comment_line(p) + &c.to_csv())?;
    }
    Ok(())
}

/// CSV summaries of the per-epoch KL and global-latent traces.
pub fn write_trace_csvs(out: &Path, report: &EpochsReport) -> Result<()> {
    let p = &report.provenance;
    let mut kl = comment_line(p) + "epoch,kl_qp_mean,total\n";
    for e in &report.epochs {
        kl.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.kl_qp_mean, e.total));
    }
    write(out.join("kl_trace.csv"), kl)?;
    let mut g = comment_line(p) + "epoch,mean_avg,var_avg\n";
    for r in &report.global {
        g.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.mean_avg, r.var_avg));
    }
    write(out.join("global_trace.csv"), g)
}

/// Runs the full experiment and writes every artifact into `out`.
///
/// Files: `checkpoint.bin`, `trace.jsonl` (provenance line, then one record
/// per step), `epochs.json`, `metrics.json`, `uncertainty.json`,
/// `kl_trace.csv`, `global_trace.csv`, `draws_<id>.csv`, `roc_*.csv`, and
/// the split, normalized datasets under `data/`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    let prov = config.provenance();
    fs::create_dir_all(out)?;
    let (source, target) = config.datasets()?;
    let train_cfg = config.train_config();
    let (state, trace, source, target) = fit(&train_cfg, &source, &target)?;

    save_checkpoint(&state, &out.join("checkpoint.bin"), Some(&prov))?;
    save_dataset(&source, &out.join("data/source"), Some(&prov))?;
    save_dataset(&target, &out.join("data/target"), Some(&prov))?;

    let mut jsonl = serde_json::to_string(&serde_json::json!({ "provenance": &prov }))?;
    jsonl.push('\n');
    jsonl.push_str(&trace.steps_jsonl()?);
    write(out.join("trace.jsonl"), jsonl)?;
    let epochs = EpochsReport {
        provenance: prov.clone(),
        epochs: trace.epochs.clone(),
        global: trace.global.clone(),
        gcn: trace.gcn.clone(),
        gcn_on_reference: trace.gcn_on_reference,
    };
    write(out.join("epochs.json"), serde_json::to_string_pretty(&epochs)?)?;
    write_trace_csvs(out, &epochs)?;

    let (m_source, roc_s) = evaluate_state(&state, &source)?;
    let (m_target, roc_t) = evaluate_state(&state, &target)?;
    write_roc(out, "gtnp_source", &roc_s, &prov)?;
    write_roc(out, "gtnp_target", &roc_t, &prov)?;
    let mut target_accuracy = BTreeMap::new();
    target_accuracy.insert("gtnp".to_string(), m_target.metrics.accuracy);
    info!("gtnp target accuracy {:.4}", m_target.metrics.accuracy);

    let mut baselines = BTreeMap::new();
    let mut variants = config.baselines.clone();
    variants.sort();
    variants.dedup();
    for v in variants {
        let model = train_baseline(&config.baseline_config(v), &source, &target)?;
        let idx = target.test_indices();
        let probs = model.predict_indices(&target, &idx)?;
        let (m, roc) = evaluate_probs(&probs, &target.labels_at(&idx), model.classes)?;
        write_roc(out, &format!("{}_target", v.name()), &roc, &prov)?;
        info!("{} target accuracy {:.4}", v.name(), m.metrics.accuracy);
        target_accuracy.insert(v.name().to_string(), m.metrics.accuracy);
        baselines.insert(v.name().to_string(), m);
    }

    let metrics = MetricsReport {
        provenance: prov.clone(),
        amp_interpretation: AMP_INTERPRETATION.to_string(),
        gtnp: GtnpMetrics {
            source: m_source,
            target: m_target,
        },
        baselines,
        target_accuracy,
    };
    write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;

    write_uncertainty(out, &state, &target, &trace.global, &config.uncertainty, &prov)?;

    Ok(ExperimentOutcome {
        state,
        trace,
        source,
        target,
        metrics,
    })
}

/// Maps `selected` entries, counted within the evaluated set, to dataset
/// positions.
pub fn resolve_selected(selected: &[usize], idx: &[usize]) -> Result<Vec<usize>> {
    selected
        .iter()
        .map(|&k| {
            idx.get(k).copied().ok_or_else(|| {
                Error::Config(format!("selected sample {k} but only {} are evaluated", idx.len()))
            })
        })
        .collect()
}

/// Writes `uncertainty.json` and one draw CSV per selected sample. Selected
/// entries count within the evaluated (test) set.
pub fn write_uncertainty(
    out: &Path,
    state: &TrainState,
    data: &DomainDataset,
    global_trace: &[GlobalRecord],
    config: &UncertaintyConfig,
    prov: &Provenance,
) -> Result<()> {
    let idx = evaluation_indices(data);
    let mut config = config.clone();
    config.selected = resolve_selected(&config.selected, &idx)?;
    let (report, locals) = uncertainty_report(state, data, &idx, global_trace, &config, prov.seed)?;
    let doc = serde_json::json!({ "provenance": prov, "report": report });
    write(out.join("uncertainty.json"), serde_json::to_string_pretty(&doc)?)?;
    for l in &locals {
        write(out.join(format!("draws_{}.csv", l.id)), comment_line(prov) + &draws_csv(l))?;
    }
    Ok(())
}
