#![allow(dead_code)]

use std::path::Path;

use drift_core::attacks::{AttackKind, AttackSpec};
use drift_core::training::{InnerPgd, TrainConfig, Warmups};
use drift_harness::config::{BankSpec, DiagnosticsConfig, ExperimentConfig, ModelSpec};
use drift_harness::dataset::DatasetSpec;

/// A config small enough to run end to end in a couple of seconds.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let attack = AttackSpec { steps: 3, eot_samples: 2, ..AttackSpec::default() };
    ExperimentConfig {
        id: "tiny".into(),
        seed: 11,
        dataset: DatasetSpec { classes: 3, side: 8, train: 18, eval: 9, ..Default::default() },
        model: ModelSpec { conv1: 4, conv2: 2, pretrain_epochs: 5, ..Default::default() },
        bank: BankSpec { k: 2, hidden: 4, ..Default::default() },
        train: TrainConfig {
            epochs: 3,
            batch_size: 6,
            warmups: Warmups { js: 1, lvjp: 1, adv: 2 },
            inner_pgd: InnerPgd { steps: 2, ..Default::default() },
            ..Default::default()
        },
        attacks: vec![
            attack.clone(),
            AttackSpec { epsilon: 0.0, ..attack.clone() },
            AttackSpec { kind: AttackKind::Square, query_budget: 20, ..attack },
        ],
        diagnostics: DiagnosticsConfig {
            samples: 3,
            eot_samples: 4,
            directions: 2,
            grid: 5,
            probe_counts: vec![2, 4],
            probe_trials: 30,
            overhead_trials: 100,
            ..Default::default()
        },
        output_dir: out.to_path_buf(),
        ..Default::default()
    }
}
