use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Domain, DomainDataset, LabeledSample, SampleSet};
use crate::error::{Error, Result};
use crate::numerics::{stream_rng, Tensor};

/// Transformation applied to target-domain samples.
///
/// Features are grouped in consecutive pairs `(x[2k], x[2k+1])`; each pair
/// is rotated by `rotation_deg`, then everything is scaled, offset, and
/// optionally perturbed by extra noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftDescriptor {
    pub rotation_deg: f64,
    pub scale: f64,
    pub offset: f64,
    pub extra_noise_std: f64,
}

impl Default for ShiftDescriptor {
    fn default() -> Self {
        ShiftDescriptor {
            rotation_deg: 0.0,
            scale: 1.0,
            offset: 0.0,
            extra_noise_std: 0.0,
        }
    }
}

impl ShiftDescriptor {
    fn apply(&self, x: &mut [f64]) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        for pair in x.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        for v in x.iter_mut() {
            *v = self.scale * *v + self.offset;
        }
    }
}

/// Two-domain synthetic classification task.
///
/// Class prototypes live on per-pair circles: pair `k` of class `c` sits at
/// radius `r_k` and angle `phase_k + c * class_spacing_deg`, so a rotation
/// shift moves every class toward its angular neighbour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub class_count: usize,
    pub shape: [usize; 2],
    /// Explicit prototypes (`class_count` vectors of `h * w` values);
    /// generated from the seed when absent.
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub class_spacing_deg: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub shift: ShiftDescriptor,
    pub samples_per_class: usize,
    pub target_samples_per_class: Option<usize>,
    /// Class 0 exists only in the target domain.
    pub emerging_class: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 4,
            shape: [32, 32],
            prototypes: None,
            class_spacing_deg: 45.0,
            amplitude: 1.0,
            noise_std: 0.1,
            shift: ShiftDescriptor {
                rotation_deg: 30.0,
                scale: 1.0,
                offset: 0.5,
                extra_noise_std: 0.0,
            },
            samples_per_class: 200,
            target_samples_per_class: None,
            emerging_class: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if self.shape[0] == 0 || self.shape[1] == 0 {
            return bad("empty sample shape".into());
        }
        if !(self.noise_std >= 0.0) || !(self.shift.extra_noise_std >= 0.0) {
            return bad("noise std must be non-negative".into());
        }
        if self.samples_per_class == 0 || self.target_samples_per_class == Some(0) {
            return bad("samples per class must be at least 1".into());
        }
        if let Some(p) = &self.prototypes {
            let f = self.shape[0] * self.shape[1];
            if p.len() != self.class_count || p.iter().any(|v| v.len() != f) {
                return bad(format!("prototypes must be {} vectors of {f}", self.class_count));
            }
        }
        Ok(())
    }

    fn features(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    fn prototype_set(&self) -> Vec<Vec<f64>> {
        if let Some(p) = &self.prototypes {
            return p.clone();
        }
        let f = self.features();
        let mut rng = stream_rng(self.seed, u64::MAX);
        let pairs: Vec<(f64, f64)> = (0..f / 2)
            .map(|_| {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let radius = self.amplitude * rng.random_range(0.5..1.5);
                (phase, radius)
            })
            .collect();
        (0..self.class_count)
            .map(|c| {
                let turn = (c as f64 * self.class_spacing_deg).to_radians();
                let mut v = vec![0.0; f];
                for (k, &(phase, r)) in pairs.iter().enumerate() {
                    v[2 * k] = r * (phase + turn).cos();
                    v[2 * k + 1] = r * (phase + turn).sin();
                }
                v
            })
            .collect()
    }

    fn classes_in(&self, domain: Domain) -> std::ops::Range<usize> {
        match (domain, self.emerging_class) {
            (Domain::Source, true) => 1..self.class_count,
            _ => 0..self.class_count,
        }
    }
}

fn noise(seed: u64, stream: u64, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = stream_rng(seed, stream);
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Noiseless rendering of a class prototype as seen in `domain`.
pub fn render_prototype(config: &SynthConfig, class: usize, domain: Domain) -> Result<Tensor> {
    config.validate()?;
    if class >= config.class_count {
        return Err(Error::Config(format!("class {class} out of range")));
    }
    let mut v = config.prototype_set().swap_remove(class);
    if domain == Domain::Target {
        config.shift.apply(&mut v);
    }
    Tensor::new(&config.shape, v)
}

/// Generates the source and target datasets.
///
/// Sample `j` of class `c` draws its base noise from a stream keyed by
/// `(c, j)`; the target copy is the shifted version of the same base, plus
/// optional extra noise. With an identity shift both domains therefore hold
/// identical per-class sample sets.
pub fn synth_generate(config: &SynthConfig) -> Result<(DomainDataset, DomainDataset)> {
    config.validate()?;
    let protos = config.prototype_set();
    let f = config.features();
    let shape = (config.shape[0], config.shape[1]);
    let build = |domain: Domain, per_class: usize| -> Result<DomainDataset> {
        let mut samples = Vec::new();
        for c in config.classes_in(domain) {
            for j in 0..per_class {
                let stream = ((c as u64) << 32) | j as u64;
                let base = noise(config.seed, stream, f, config.noise_std);
                let mut v: Vec<f64> = protos[c].iter().zip(&base).map(|(p, e)| p + e).collect();
                if domain == Domain::Target {
                    config.shift.apply(&mut v);
                    let extra = noise(config.seed, stream | 1 << 63, f, config.shift.extra_noise_std);
                    v.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
                samples.push(LabeledSample {
                    id: samples.len(),
                    matrix: Tensor::new(&config.shape, v)?,
                    label: c,
                    domain,
                    set: SampleSet::Rest,
                });
            }
        }
        DomainDataset::new(samples, config.class_count, shape, domain)
    };
    let source = build(Domain::Source, config.samples_per_class)?;
    let target = build(
        Domain::Target,
        config.target_samples_per_class.unwrap_or(config.samples_per_class),
    )?;
    Ok((source, target))
}
