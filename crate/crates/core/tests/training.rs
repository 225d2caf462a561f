use drift_core::losses::LossWeights;
use drift_core::models::{pretrain_and_freeze, BaseClassifier, FilterArch, FilterBank};
use drift_core::training::*;
use drift_core::{rng, Dataset, DriftError};
use drift_tensor::Tensor;
use rand::Rng;

const SHAPE: [usize; 3] = [3, 6, 6];

fn dataset(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, &[]);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let images = labels
        .iter()
        .map(|&y| Tensor::from_fn(&SHAPE, |i| (0.3 + 0.3 * ((i / 36) == y) as u8 as f64 + r.random_range(-0.1..0.1)).clamp(0.0, 1.0)))
        .collect();
    Dataset::new(images, labels, (0..n as u64).collect()).unwrap()
}

fn frozen_model(data: &Dataset) -> BaseClassifier {
    pretrain_and_freeze(BaseClassifier::new(&SHAPE, 3, 1).unwrap(), data, 3, 3e-3, 2).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        warmups: Warmups { js: 1, lvjp: 1, adv: 2 },
        inner_pgd: InnerPgd { steps: 2, ..Default::default() },
        probes: drift_core::losses::ProbeConfig { p_v: 2, p_w: 2, seed: 3 },
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_bank_unchanged() {
    let data = dataset(6, 1);
    let model = frozen_model(&data);
    let bank = FilterBank::with_hidden(FilterArch::ResBlock, 2, 4, &SHAPE, 5).unwrap();
    let (out, log) = train_drift(&model, &bank, &data, &small_config(0)).unwrap();
    assert_eq!(out.checksum(), bank.checksum());
    assert!(log.is_empty());
}

#[test]
fn pure_ce_first_epoch_equals_frozen_model_loss() {
    let data = dataset(8, 2);
    let model = frozen_model(&data);
    let bank = FilterBank::with_hidden(FilterArch::ResBlock, 3, 4, &SHAPE, 6).unwrap();
    let cfg = TrainConfig { batch_size: 8, warmups: Warmups { js: 5, lvjp: 5, adv: 5 }, ..small_config(2) };
    let (_, log) = train_drift(&model, &bank, &data, &cfg).unwrap();
    let frozen_ce: f64 = data
        .images
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| drift_tensor::kernels::cross_entropy(model.logits(x).unwrap().data(), y))
        .sum::<f64>()
        / data.len() as f64;
    assert!((log[0].ce - frozen_ce).abs() < 1e-12, "{} vs {frozen_ce}", log[0].ce);
    assert!(log.iter().all(|l| l.js == 0.0 && l.lvjp == 0.0 && l.adv == 0.0 && l.total == l.ce));
}

#[test]
fn warmup_gating_is_visible_in_logs_and_base_is_untouched() {
    let data = dataset(8, 3);
    let model = frozen_model(&data);
    let before = model.checksum();
    let bank = FilterBank::with_hidden(FilterArch::ResBlock, 2, 4, &SHAPE, 7).unwrap();
    let (trained, log) = train_drift(&model, &bank, &data, &small_config(3)).unwrap();
    assert_eq!(model.checksum(), before);
    assert_ne!(trained.checksum(), bank.checksum());
    assert_eq!((log[0].js, log[0].lvjp, log[0].adv), (0.0, 0.0, 0.0));
    assert!(log[1].js > 0.0 && log[1].lvjp > 0.0 && log[1].adv == 0.0);
    assert!(log[2].adv > 0.0);
    let w = LossWeights::default();
    for l in &log {
        let total = w.alpha * l.ce + w.beta_js * l.js + w.beta_lvjp * l.lvjp + w.lambda_adv * l.adv;
        assert!((l.total - total).abs() < 1e-9);
        assert!(l.grad_norm.is_finite());
        assert_eq!(l.n_sanitized, 0);
    }
    let csv = log[0].csv_row();
    assert_eq!(csv.split(',').count(), EpochLog::CSV_HEADER.split(',').count());
}

#[test]
fn training_is_deterministic() {
    let data = dataset(8, 4);
    let model = frozen_model(&data);
    let bank = FilterBank::with_hidden(FilterArch::ResBlock, 2, 4, &SHAPE, 8).unwrap();
    let cfg = small_config(3);
    let (a, la) = train_drift(&model, &bank, &data, &cfg).unwrap();
    let (b, lb) = train_drift(&model, &bank, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn unfrozen_model_and_empty_data_are_rejected() {
    let data = dataset(4, 5);
    let bank = FilterBank::with_hidden(FilterArch::ResBlock, 2, 4, &SHAPE, 9).unwrap();
    let unfrozen = BaseClassifier::new(&SHAPE, 3, 1).unwrap();
    assert!(matches!(train_drift(&unfrozen, &bank, &data, &small_config(1)), Err(DriftError::Contract(_))));
    let model = frozen_model(&data);
    assert!(matches!(train_drift(&model, &bank, &data.head(0), &small_config(1)), Err(DriftError::Domain(_))));
}

#[test]
fn separation_terms_fall_during_training() {
    let data = dataset(12, 6);
    let model = frozen_model(&data);
    let bank = FilterBank::with_hidden(FilterArch::ResBlock, 2, 4, &SHAPE, 10).unwrap();
    let cfg = TrainConfig { lr: 1e-2, warmups: Warmups { js: 0, lvjp: 0, adv: 10 }, ..small_config(4) };
    let (_, log) = train_drift(&model, &bank, &data, &cfg).unwrap();
    assert!(log[3].js < log[0].js, "{log:?}");
}
