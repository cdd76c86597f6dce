mod common;

use common::{tiny_dims, tiny_task};
use gtnp::baselines::{train_baseline, BaselineConfig, BaselineVariant};
use gtnp::data::{synth_generate, DomainDataset, ShiftDescriptor, SynthConfig};
use gtnp::losses::MmdConfig;
use gtnp::numerics::OptimizerKind;

fn config(variant: BaselineVariant, seed: u64, epochs: usize) -> BaselineConfig {
    BaselineConfig {
        variant,
        batch_size: 16,
        learning_rate: 0.01,
        optimizer: OptimizerKind::Adam,
        epochs,
        seed,
        dims: tiny_dims(8),
        lambda_mmd: 1.0,
        mmd: MmdConfig::default(),
    }
}

fn accuracy(model: &gtnp::baselines::BaselineModel, data: &DomainDataset) -> f64 {
    let idx = data.test_indices();
    let probs = model.predict_indices(data, &idx).unwrap();
    let labels = data.labels_at(&idx);
    let hits = (0..idx.len())
        .filter(|&i| {
            let row = probs.row_slice(i);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == labels[i]
        })
        .count();
    hits as f64 / idx.len() as f64
}

#[test]
fn source_only_without_shift_transfers_unchanged() {
    let synth = SynthConfig {
        class_count: 3,
        shape: [12, 12],
        samples_per_class: 80,
        shift: ShiftDescriptor { rotation_deg: 0.0, scale: 1.0, offset: 0.0, extra_noise_std: 0.0 },
        seed: 50,
        ..SynthConfig::default()
    };
    let (mut s, mut t) = synth_generate(&synth).unwrap();
    s.split_train_test(60, 1).unwrap();
    t.split_train_test(60, 2).unwrap();
    s.normalize().unwrap();
    t.normalize().unwrap();
    let model = train_baseline(&config(BaselineVariant::SourceOnly, 50, 5), &s, &t).unwrap();
    let (a_s, a_t) = (accuracy(&model, &s), accuracy(&model, &t));
    assert!((a_s - a_t).abs() <= 0.02 + 1e-12, "source {a_s}, target {a_t}");
}

#[test]
fn baselines_are_reproducible() {
    let (s, t) = tiny_task(51, 12);
    for variant in [BaselineVariant::SourceOnly, BaselineVariant::MmdOnly] {
        let a = train_baseline(&config(variant, 51, 2), &s, &t).unwrap();
        let b = train_baseline(&config(variant, 51, 2), &s, &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.variant.name(), if variant == BaselineVariant::SourceOnly { "source_only" } else { "mmd_only" });
    }
}

#[test]
fn mmd_term_changes_the_fit_only_for_mmd_only() {
    let (s, t) = tiny_task(52, 12);
    let so = train_baseline(&config(BaselineVariant::SourceOnly, 52, 1), &s, &t).unwrap();
    let mut shuffled = t.clone();
    for smp in &mut shuffled.samples {
        smp.label = (smp.label + 1) % 3;
    }
    let so2 = train_baseline(&config(BaselineVariant::SourceOnly, 52, 1), &s, &shuffled).unwrap();
    assert_eq!(so.store, so2.store);
    let mm = train_baseline(&config(BaselineVariant::MmdOnly, 52, 1), &s, &t).unwrap();
    assert_ne!(so.store, mm.store);
    let probs = mm.predict_indices(&t, &t.test_indices()).unwrap();
    for i in 0..probs.rows() {
        assert!((probs.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
