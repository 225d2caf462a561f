//! Experiment configuration, loaded from JSON.
//!
//! Every random choice in a run derives from the single master `seed`;
//! [`ExperimentConfig::resolved`] writes the derived seeds into the
//! sub-configs, and the resolved form is what lands in the manifest.

use std::path::{Path, PathBuf};

use drift_core::attacks::{AttackKind, AttackSpec, Norm};
use drift_core::models::FilterArch;
use drift_core::rng::derive_seed;
use drift_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{HarnessError, Result};

pub const SEED_ENV: &str = "DRIFT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub conv1: usize,
    pub conv2: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { conv1: 16, conv2: 16, pretrain_epochs: 30, pretrain_lr: 3e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankSpec {
    pub k: usize,
    pub arch: FilterArch,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for BankSpec {
    fn default() -> Self {
        Self { k: 4, arch: FilterArch::ResBlock, hidden: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub consensus: bool,
    pub mismatch: bool,
    pub transfer: bool,
    pub probes: bool,
    pub gradnorm: bool,
    pub landscape: bool,
    pub overhead: bool,
    /// Eval samples used by the per-sample diagnostics.
    pub samples: usize,
    pub eot_samples: usize,
    pub etas: Vec<f64>,
    pub directions: usize,
    pub tau: f64,
    pub grid: usize,
    pub probe_counts: Vec<usize>,
    pub probe_trials: usize,
    pub probe_eps: f64,
    pub overhead_trials: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            consensus: true,
            mismatch: true,
            transfer: true,
            probes: true,
            gradnorm: true,
            landscape: true,
            overhead: true,
            samples: 50,
            eot_samples: 128,
            etas: vec![1e-2, 1e-3, 1e-4],
            directions: 10,
            tau: 3.0 / 255.0,
            grid: 41,
            probe_counts: vec![2, 5, 10, 20, 40],
            probe_trials: 200,
            probe_eps: 0.25,
            overhead_trials: 200,
            seed: 0,
        }
    }
}

impl DiagnosticsConfig {
    pub fn none() -> Self {
        Self {
            consensus: false,
            mismatch: false,
            transfer: false,
            probes: false,
            gradnorm: false,
            landscape: false,
            overhead: false,
            ..Self::default()
        }
    }

    pub fn any(&self) -> bool {
        self.consensus || self.mismatch || self.transfer || self.probes || self.gradnorm || self.landscape || self.overhead
    }
}

/// The default attack suite: adaptive PGD-EoT, MIM-EoT, BPDA, l2 PGD and
/// Square, all at the standard desk budget.
pub fn default_attacks() -> Vec<AttackSpec> {
    let linf = AttackSpec::default();
    vec![
        linf.clone(),
        AttackSpec { kind: AttackKind::Mim, ..linf.clone() },
        AttackSpec { bpda_identity: true, ..linf.clone() },
        AttackSpec { norm: Norm::L2, epsilon: 0.5, step_size: 0.05, ..linf.clone() },
        AttackSpec { kind: AttackKind::Square, ..linf },
    ]
}

/// Short label used as the key of an attack in reports.
pub fn attack_label(spec: &AttackSpec) -> String {
    let eps = match spec.norm {
        Norm::Linf => format!("{}/255", fmt_num(spec.epsilon * 255.0)),
        Norm::L2 => fmt_num(spec.epsilon),
    };
    let mut label = format!("{}-{}-{eps}", spec.kind, spec.norm);
    match spec.kind {
        AttackKind::Square => label.push_str(&format!("-q{}", spec.query_budget)),
        _ => label.push_str(&format!("-eot{}", spec.eot_samples)),
    }
    if spec.bpda_identity && spec.kind != AttackKind::Square {
        label.push_str("-bpda");
    }
    label
}

fn fmt_num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub bank: BankSpec,
    pub train: TrainConfig,
    pub attacks: Vec<AttackSpec>,
    pub diagnostics: DiagnosticsConfig,
    pub inference_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "desk".into(),
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            bank: BankSpec::default(),
            train: TrainConfig::default(),
            attacks: default_attacks(),
            diagnostics: DiagnosticsConfig::default(),
            inference_seed: 0,
            output_dir: PathBuf::from("runs/desk"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file and applies the `DRIFT_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copy with every sub-seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let s = self.seed;
        let mut cfg = self.clone();
        cfg.dataset.seed = derive_seed(s, &[1]);
        cfg.model.seed = derive_seed(s, &[2]);
        cfg.bank.seed = derive_seed(s, &[3]);
        cfg.train.seed = derive_seed(s, &[4]);
        cfg.train.probes.seed = derive_seed(s, &[5]);
        for (i, a) in cfg.attacks.iter_mut().enumerate() {
            a.seed = derive_seed(s, &[6, i as u64]);
        }
        cfg.inference_seed = derive_seed(s, &[7]);
        cfg.diagnostics.seed = derive_seed(s, &[8]);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        if self.bank.k == 0 || self.bank.hidden == 0 {
            return Err(HarnessError::Config("bank needs at least one filter and a positive hidden width".into()));
        }
        if self.model.conv1 == 0 || self.model.conv2 == 0 {
            return Err(HarnessError::Config("model widths must be positive".into()));
        }
        let d = &self.diagnostics;
        if d.any() && d.samples == 0 {
            return Err(HarnessError::Config("diagnostics need at least one sample".into()));
        }
        if d.landscape && d.grid % 2 == 0 {
            return Err(HarnessError::Config(format!("landscape grid must be odd, got {}", d.grid)));
        }
        if d.probes && d.probe_trials < 30 {
            return Err(HarnessError::Config("probe study needs at least 30 trials".into()));
        }
        Ok(())
    }
}

pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| HarnessError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(HarnessError::Config(format!("{SEED_ENV}: {e}"))),
    }
}
