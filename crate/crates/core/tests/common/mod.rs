//! Independent reference computations and small fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use gtnp::data::{synth_generate, DomainDataset, SynthConfig};
use gtnp::embedding::ModelDims;
use gtnp::losses::{LossConfig, MmdConfig};
use gtnp::numerics::{DiagGaussian, Tensor};
use gtnp::train::{TrainConfig, TrainSchedule};
use rand::Rng;
use rand_distr::StandardNormal;

/// Biased MMD² from the three kernel means, written as plain loops.
pub fn mmd_naive(xs: &[Vec<f64>], ys: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += k(x, y);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(xs, xs) + mean(ys, ys) - 2.0 * mean(xs, ys)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, n: usize, d: usize, scale: f64) -> Tensor {
    Tensor::new(&[n, d], (0..n * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Monte-Carlo estimate of `E_q[log q(x) - log p(x)]`.
pub fn kl_monte_carlo<R: Rng>(q: &DiagGaussian, p: &DiagGaussian, n: usize, rng: &mut R) -> f64 {
    let log_density = |g: &DiagGaussian, x: &[f64]| -> f64 {
        g.mean
            .iter()
            .zip(&g.logvar)
            .zip(x)
            .map(|((m, lv), v)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (v - m).powi(2) / lv.exp()))
            .sum()
    };
    let mut acc = 0.0;
    let mut x = vec![0.0; q.mean.len()];
    for _ in 0..n {
        for (k, xi) in x.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *xi = q.mean[k] + (0.5 * q.logvar[k]).exp() * e;
        }
        acc += log_density(q, &x) - log_density(p, &x);
    }
    acc / n as f64
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly, ties
/// counting one half.
pub fn mann_whitney_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

pub fn tiny_dims(latent: usize) -> ModelDims {
    ModelDims {
        d_f: 8,
        d_g: 4,
        d_u: latent,
        d_z: latent,
        conv_channels: [2, 3],
        gcn_hidden: 8,
        edge_hidden: 8,
        message_width: 8,
    }
}

/// A small, fast three-class task with split and normalized domains.
pub fn tiny_task(seed: u64, per_class: usize) -> (DomainDataset, DomainDataset) {
    let synth = SynthConfig {
        class_count: 3,
        shape: [10, 10],
        samples_per_class: per_class,
        seed,
        ..SynthConfig::default()
    };
    let (mut s, mut t) = synth_generate(&synth).unwrap();
    let s_test = s.len() / 5;
    let t_test = t.len() / 4;
    s.split_train_test(s_test, seed).unwrap();
    t.split_train_test(t_test, seed).unwrap();
    s.normalize().unwrap();
    t.normalize().unwrap();
    (s, t)
}

pub fn tiny_config(seed: u64, n_ref: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        seed,
        schedule: TrainSchedule {
            batch_size: batch,
            epochs: 1,
            n_ref,
            context_size: 8,
            gcn: gtnp::graph::GcnTrainConfig {
                epochs: 5,
                ..Default::default()
            },
            ..TrainSchedule::default()
        },
        dims: tiny_dims(8),
        losses: LossConfig {
            mmd: MmdConfig::Fixed { sigma: 2.0 },
            ..LossConfig::default()
        },
    }
}

use gtnp::numerics::{gradient_check, Bound};
use gtnp::train::{initialize, loss_graph, StepInputs, TrainState};

/// Initialized state on the tiny task plus step inputs for a 4-sample batch
/// per domain holding two reference and two M rows each.
pub fn micro_batch_setup(seed: u64) -> (TrainState, StepInputs, DomainDataset, DomainDataset) {
    let (mut s, mut t) = tiny_task(seed, 12);
    let cfg = tiny_config(seed, 10, 4);
    let (state, _, _) = initialize(&cfg, &mut s, &mut t).unwrap();
    let pick = |d: &DomainDataset| {
        let mut b: Vec<usize> = d.reference_indices()[..2].to_vec();
        b.extend(&d.rest_indices()[..2]);
        b
    };
    let (sb, tb) = (pick(&s), pick(&t));
    let inputs = state.step_inputs(&s, &t, &sb, &tb).unwrap();
    (state, inputs, s, t)
}

/// Largest finite-difference gradient error of each loss term and of the
/// total, with respect to every model parameter.
pub fn term_gradient_errors(state: &TrainState, inputs: &StepInputs) -> Vec<(&'static str, f64)> {
    let point: Vec<Tensor> = state.store.iter().map(|(_, t)| t.clone()).collect();
    let model = &state.model;
    let losses = &state.config.losses;
    let names = ["dist_source", "dist_target", "cls_source", "cls_target", "mmd", "global_kl", "total"];
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let err = gradient_check(
                |_, v| {
                    let p = Bound::from_vars(v.to_vec());
                    let l = loss_graph(model, &p, inputs, losses);
                    match k {
                        0 => l.dist_source,
                        1 => l.dist_target,
                        2 => l.cls_source.unwrap(),
                        3 => l.cls_target.unwrap(),
                        4 => l.mmd,
                        5 => l.global_kl,
                        _ => l.total,
                    }
                },
                &point,
                1e-6,
            )
            .unwrap();
            (*name, err)
        })
        .collect()
}
