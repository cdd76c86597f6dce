//! Sample containers, windowing, normalization, reference-set splitting
//! and synthetic two-domain generation.

mod io;
mod synth;
mod window;

pub use io::{load_dataset, prepare_from_manifest, save_dataset, DatasetMeta, Manifest, SignalEntry};
pub use synth::{render_prototype, synth_generate, ShiftDescriptor, SynthConfig};
pub use window::window_signal;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stream_rng, Tensor};

/// Variance floor for constant features.
pub const MIN_VARIANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Which partition a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSet {
    /// Reference set.
    #[serde(rename = "R")]
    Reference,
    /// Training samples outside the reference set.
    #[serde(rename = "M")]
    Rest,
    #[serde(rename = "test")]
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub matrix: Tensor,
    pub label: usize,
    pub domain: Domain,
    pub set: SampleSet,
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, matrix: &mut Tensor) -> Result<()> {
        if matrix.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization has {} features, sample has {}",
                self.mean.len(),
                matrix.len()
            )));
        }
        for ((v, m), s) in matrix.data_mut().iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
        Ok(())
    }

    pub fn invert(&self, matrix: &mut Tensor) {
        for ((v, m), s) in matrix.data_mut().iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }
}

/// All samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub samples: Vec<LabeledSample>,
    pub class_count: usize,
    pub shape: (usize, usize),
    pub domain: Domain,
    pub normalization: Option<Normalization>,
}

/// Positions (into `DomainDataset::samples`) of the R and M sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceSplit {
    pub reference: Vec<usize>,
    pub rest: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        samples: Vec<LabeledSample>,
        class_count: usize,
        shape: (usize, usize),
        domain: Domain,
    ) -> Result<Self> {
        let ds = DomainDataset {
            samples,
            class_count,
            shape,
            domain,
            normalization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.shape;
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.samples {
            if s.matrix.shape() != [h, w] {
                return Err(Error::Shape(format!(
                    "sample {} has shape {:?}, dataset is {h}x{w}",
                    s.id,
                    s.matrix.shape()
                )));
            }
            if s.label >= self.class_count {
                return Err(Error::Data(format!(
                    "sample {} label {} outside {} classes",
                    s.id, s.label, self.class_count
                )));
            }
            if s.domain != self.domain {
                return Err(Error::Data(format!("sample {} has the wrong domain tag", s.id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    /// Positions of training samples (R or M).
    pub fn training_indices(&self) -> Vec<usize> {
        self.positions(|s| s != SampleSet::Test)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.positions(|s| s == SampleSet::Test)
    }

    pub fn reference_indices(&self) -> Vec<usize> {
        self.positions(|s| s == SampleSet::Reference)
    }

    pub fn rest_indices(&self) -> Vec<usize> {
        self.positions(|s| s == SampleSet::Rest)
    }

    fn positions(&self, keep: impl Fn(SampleSet) -> bool) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| keep(self.samples[i].set))
            .collect()
    }

    /// Labels present among the given positions, sorted.
    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn label_set(&self, idx: &[usize]) -> Vec<usize> {
        let mut set: Vec<usize> = self.labels_at(idx);
        set.sort_unstable();
        set.dedup();
        set
    }

    /// Stacks the matrices at `idx` into an NHWC tensor `[n, h, w, 1]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let (h, w) = self.shape;
        let mut data = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            data.extend_from_slice(self.samples[i].matrix.data());
        }
        Tensor::new(&[idx.len(), h, w, 1], data).expect("validated shapes")
    }

    /// Tags a random `test_count` subset as test data and the rest as M.
    pub fn split_train_test(&mut self, test_count: usize, seed: u64) -> Result<()> {
        if test_count > self.len() {
            return Err(Error::Data(format!(
                "{} test samples requested from {}",
                test_count,
                self.len()
            )));
        }
        let mut rng = stream_rng(seed, 0x7e57);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        for s in &mut self.samples {
            s.set = SampleSet::Rest;
        }
        for &i in &order[..test_count] {
            self.samples[i].set = SampleSet::Test;
        }
        Ok(())
    }

    /// Fits z-score statistics on the training portion (all samples when
    /// nothing is tagged for training) and applies them to every sample.
    pub fn normalize(&mut self) -> Result<()> {
        let mut fit = self.training_indices();
        if fit.is_empty() {
            fit = (0..self.len()).collect();
        }
        if fit.is_empty() {
            return Err(Error::Data("cannot normalize an empty dataset".into()));
        }
        let f = self.feature_count();
        let n = fit.len() as f64;
        let mut mean = vec![0.0; f];
        for &i in &fit {
            for (m, v) in mean.iter_mut().zip(self.samples[i].matrix.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for &i in &fit {
            for ((acc, v), m) in var.iter_mut().zip(self.samples[i].matrix.data()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let mut clamped = 0;
        let std = var
            .into_iter()
            .map(|v| {
                let v = v / n;
                if v < MIN_VARIANCE {
                    clamped += 1;
                    1.0
                } else {
                    v.sqrt()
                }
            })
            .collect();
        if clamped > 0 {
            warn!("{clamped} zero-variance features; their scale is left at 1");
        }
        let stats = Normalization { mean, std };
        self.apply_normalization(&stats)?;
        Ok(())
    }

    /// Applies previously fitted statistics without refitting.
    pub fn apply_normalization(&mut self, stats: &Normalization) -> Result<()> {
        for s in &mut self.samples {
            stats.apply(&mut s.matrix)?;
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    /// Randomly promotes `n_ref` training samples to the reference set; the
    /// remaining training samples become M.
    pub fn split_reference(&mut self, n_ref: usize, seed: u64) -> Result<ReferenceSplit> {
        let train = self.training_indices();
        if n_ref == 0 || n_ref > train.len() {
            return Err(Error::Data(format!(
                "reference set of {} requested from {} training samples",
                n_ref,
                train.len()
            )));
        }
        let mut rng = stream_rng(seed, 0x2ef);
        let mut chosen: Vec<usize> = sample_indices(&mut rng, train.len(), n_ref)
            .into_iter()
            .map(|k| train[k])
            .collect();
        chosen.sort_unstable();
        for &i in &train {
            self.samples[i].set = SampleSet::Rest;
        }
        for &i in &chosen {
            self.samples[i].set = SampleSet::Reference;
        }
        Ok(ReferenceSplit {
            reference: chosen,
            rest: self.rest_indices(),
        })
    }

    /// Re-tags the dataset (and every sample) with a domain.
    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        for s in &mut self.samples {
            s.domain = domain;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|i| LabeledSample {
                id: i,
                matrix: Tensor::new(&[2, 2], vec![i as f64, 3.0, (i * i) as f64, -(i as f64)]).unwrap(),
                label: i % 2,
                domain: Domain::Target,
                set: SampleSet::Rest,
            })
            .collect();
        DomainDataset::new(samples, 2, (2, 2), Domain::Target).unwrap()
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let mut ds = toy(10);
        ds.normalize().unwrap();
        assert!(ds.samples.iter().all(|s| s.matrix.data()[1] == 0.0));
    }

    #[test]
    fn z_score_moments() {
        let mut ds = toy(50);
        ds.normalize().unwrap();
        for f in [0, 2, 3] {
            let vals: Vec<f64> = ds.samples.iter().map(|s| s.matrix.data()[f]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stored_statistics_reused_on_test_data() {
        let mut train = toy(20);
        train.normalize().unwrap();
        let stats = train.normalization.clone().unwrap();
        let mut other = toy(5);
        let raw = other.samples[3].matrix.clone();
        other.apply_normalization(&stats).unwrap();
        let want = (raw.data()[0] - stats.mean[0]) / stats.std[0];
        assert_eq!(other.samples[3].matrix.data()[0], want);
    }

    #[test]
    fn test_portion_excluded_from_fit() {
        let mut ds = toy(40);
        ds.split_train_test(10, 1).unwrap();
        ds.normalize().unwrap();
        let train = ds.training_indices();
        let m: f64 = train.iter().map(|&i| ds.samples[i].matrix.data()[0]).sum::<f64>() / train.len() as f64;
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn reference_split_sizes() {
        let mut ds = toy(600);
        let split = ds.split_reference(300, 4).unwrap();
        assert_eq!(split.reference.len(), 300);
        assert_eq!(split.rest.len(), 300);
        let again = toy(600).split_reference(300, 4).unwrap();
        assert_eq!(split, again);
        let all = toy(600).split_reference(600, 4).unwrap();
        assert!(all.rest.is_empty());
        assert!(toy(10).split_reference(11, 4).is_err());
    }

    #[test]
    fn invalid_label_rejected() {
        let mut ds = toy(4);
        ds.samples[0].label = 9;
        assert!(ds.validate().is_err());
    }
}
