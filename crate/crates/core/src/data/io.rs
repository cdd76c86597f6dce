use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{window_signal, Domain, DomainDataset, LabeledSample, Normalization, SampleSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::report::Provenance;

/// Contents of `meta.json` in a serialized dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub shape: [usize; 2],
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub class_count: usize,
    /// Labels that actually occur, ascending.
    #[serde(default)]
    pub classes_present: Vec<usize>,
    #[serde(default)]
    pub ids: Vec<usize>,
    #[serde(default)]
    pub sets: Vec<SampleSet>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Writes `samples.bin` (little-endian f64, sample-major, row-major) and
/// `meta.json` into `dir`.
pub fn save_dataset(ds: &DomainDataset, dir: &Path, provenance: Option<&Provenance>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(ds.len() * ds.feature_count() * 8);
    for s in &ds.samples {
        for v in s.matrix.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("samples.bin"), bytes)?;
    let meta = DatasetMeta {
        shape: [ds.shape.0, ds.shape.1],
        labels: ds.samples.iter().map(|s| s.label).collect(),
        domain: ds.domain,
        class_count: ds.class_count,
        classes_present: ds.label_set(&(0..ds.len()).collect::<Vec<_>>()),
        ids: ds.samples.iter().map(|s| s.id).collect(),
        sets: ds.samples.iter().map(|s| s.set).collect(),
        normalization: ds.normalization.clone(),
        provenance: provenance.cloned(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let bytes = fs::read(dir.join("samples.bin"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("samples.bin").display())))?;
    let [h, w] = meta.shape;
    let n = meta.labels.len();
    if bytes.len() != n * h * w * 8 {
        return Err(Error::Data(format!(
            "samples.bin holds {} bytes, meta describes {n} samples of {h}x{w}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let ids = if meta.ids.is_empty() { (0..n).collect() } else { meta.ids.clone() };
    let sets = if meta.sets.is_empty() { vec![SampleSet::Rest; n] } else { meta.sets.clone() };
    if ids.len() != n || sets.len() != n {
        return Err(Error::Data("meta.json ids/sets length mismatch".into()));
    }
    let samples = (0..n)
        .map(|i| {
            Ok(LabeledSample {
                id: ids[i],
                matrix: Tensor::new(&[h, w], values[i * h * w..(i + 1) * h * w].to_vec())?,
                label: meta.labels[i],
                domain: meta.domain,
                set: sets[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = DomainDataset::new(samples, meta.class_count, (h, w), meta.domain)?;
    ds.normalization = meta.normalization;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalEntry {
    pub path: PathBuf,
    pub condition: String,
    pub class: usize,
}

/// Maps plain-text signal files to operating conditions and classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub signals: Vec<SignalEntry>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_window() -> usize {
    1024
}

fn default_side() -> usize {
    32
}

fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("signal file {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Windows every signal of a manifest and returns one normalized dataset per
/// operating condition, keyed by condition name. Signal paths are resolved
/// relative to the manifest's directory. All datasets share the manifest's
/// label space.
pub fn prepare_from_manifest(manifest_path: &Path) -> Result<BTreeMap<String, DomainDataset>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("manifest {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", manifest_path.display())))?;
    if manifest.signals.is_empty() {
        return Err(Error::Data("manifest lists no signals".into()));
    }
    if manifest.window != manifest.side * manifest.side {
        return Err(Error::Config(format!(
            "window {} must equal side^2 = {}",
            manifest.window,
            manifest.side * manifest.side
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let class_count = manifest.signals.iter().map(|s| s.class).max().unwrap_or(0) + 1;
    let mut grouped: BTreeMap<String, Vec<LabeledSample>> = BTreeMap::new();
    for entry in &manifest.signals {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        let signal = read_signal(&path)?;
        let samples = grouped.entry(entry.condition.clone()).or_default();
        for m in window_signal(&signal, manifest.window, manifest.side)? {
            samples.push(LabeledSample {
                id: samples.len(),
                matrix: m,
                label: entry.class,
                domain: Domain::Source,
                set: SampleSet::Rest,
            });
        }
    }
    let mut out = BTreeMap::new();
    for (condition, samples) in grouped {
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "condition {condition} has no complete window"
            )));
        }
        let mut ds = DomainDataset::new(
            samples,
            class_count,
            (manifest.side, manifest.side),
            Domain::Source,
        )?;
        ds.normalize()?;
        out.insert(condition, ds);
    }
    Ok(out)
}
