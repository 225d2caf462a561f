//! End-to-end experiment pipeline and robust-accuracy evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drift_core::attacks::{adaptive_attack, margin, square_attack, AttackKind, AttackSpec, EotOracle};
use drift_core::diagnostics::{self, ConsensusMode, Summary};
use drift_core::models::{ensemble_forward, pretrain_and_freeze, BaseClassifier, BaseWidths, FilterBank, PathSelect};
use drift_core::training::{train_drift, EpochLog};
use drift_core::Dataset;
use drift_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{attack_label, ExperimentConfig};
use crate::dataset::generate_synthetic_dataset;
use crate::error::{HarnessError, Result, StageContext};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const CHECKPOINT: &str = "checkpoint.dtns";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const ATTACKS_CSV: &str = "attacks.csv";
pub const STATUS: &str = "status.json";
pub const DIAGNOSTICS_DIR: &str = "diagnostics";

/// Outcome of one attack on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: u64,
    pub attack: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub eot_samples: usize,
    pub success: bool,
    /// Gradient evaluations for first-order attacks, score queries for Square.
    pub queries: usize,
    /// True-class logit minus best other logit at the final evaluation.
    pub margin: f64,
}

impl SampleOutcome {
    pub const CSV_HEADER: &'static str = "sample_id,attack,epsilon,steps,eot_samples,success,queries,margin";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sample_id, self.attack, self.epsilon, self.steps, self.eot_samples, self.success as u8, self.queries, self.margin
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetric {
    pub label: String,
    pub spec: AttackSpec,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub mean_off_diagonal: f64,
    pub gamma: Vec<Vec<f64>>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub seed: u64,
    pub n_eval: usize,
    pub base_accuracy: Option<f64>,
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackMetric>,
    pub consensus: Option<ConsensusSummary>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl MetricsRecord {
    /// The record with wall-clock timings removed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self { timings: BTreeMap::new(), ..self.clone() }
    }

    pub fn robust(&self, label: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.label == label).map(|a| a.robust_accuracy)
    }
}

fn final_logits(bank: &FilterBank, model: &BaseClassifier, x: &Tensor, id: u64, inference_seed: u64) -> Result<Tensor> {
    Ok(ensemble_forward(bank, model, x, PathSelect::Sample { seed: inference_seed, stream: id })?)
}

/// Attacks one sample and classifies the result with the stochastic ensemble.
///
/// The final forward pass for sample `id` always uses the same filter draw,
/// so an attack that leaves the input unchanged reproduces the clean outcome.
pub fn attack_sample(
    bank: &FilterBank,
    model: &BaseClassifier,
    x: &Tensor,
    y: usize,
    id: u64,
    spec: &AttackSpec,
    inference_seed: u64,
) -> Result<SampleOutcome> {
    let s = spec.for_sample(id);
    let (x_adv, queries) = match s.kind {
        AttackKind::Square => {
            let score = |z: &Tensor, q: usize| -> drift_core::Result<f64> {
                let logits = ensemble_forward(bank, model, z, PathSelect::Sample { seed: s.seed, stream: q as u64 })?;
                Ok(margin(&logits, y))
            };
            let r = square_attack(score, x, &s)?;
            (r.x_adv, r.queries)
        }
        AttackKind::Pgd | AttackKind::Mim => (adaptive_attack(bank, model, x, y, &s)?.x_adv, s.steps * s.eot_samples),
    };
    let logits = final_logits(bank, model, &x_adv, id, inference_seed)?;
    Ok(SampleOutcome {
        sample_id: id,
        attack: s.kind,
        epsilon: s.epsilon,
        steps: s.steps,
        eot_samples: s.eot_samples,
        success: logits.argmax() != y,
        queries,
        margin: margin(&logits, y),
    })
}

/// Per-sample outcomes of one attack over a dataset, in sample order.
pub fn attack_dataset(bank: &FilterBank, model: &BaseClassifier, data: &Dataset, spec: &AttackSpec, inference_seed: u64) -> Result<Vec<SampleOutcome>> {
    spec.validate()?;
    (0..data.len())
        .into_par_iter()
        .map(|n| attack_sample(bank, model, &data.images[n], data.labels[n], data.ids[n], spec, inference_seed))
        .collect()
}

/// Clean accuracy (%) of the stochastic ensemble with the evaluation draws.
pub fn clean_accuracy(bank: &FilterBank, model: &BaseClassifier, data: &Dataset, inference_seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(HarnessError::Config("evaluation set is empty".into()));
    }
    let correct: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|n| Ok(final_logits(bank, model, &data.images[n], data.ids[n], inference_seed)?.argmax() == data.labels[n]))
        .collect::<Result<_>>()?;
    Ok(100.0 * correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

fn robust_from(outcomes: &[SampleOutcome]) -> f64 {
    100.0 * outcomes.iter().filter(|o| !o.success).count() as f64 / outcomes.len() as f64
}

/// Clean and per-attack robust accuracy of the stochastic ensemble.
pub fn evaluate_robust_accuracy(
    bank: &FilterBank,
    model: &BaseClassifier,
    eval: &Dataset,
    specs: &[AttackSpec],
    inference_seed: u64,
) -> Result<MetricsRecord> {
    Ok(evaluate_with_outcomes(bank, model, eval, specs, inference_seed)?.0)
}

fn evaluate_with_outcomes(
    bank: &FilterBank,
    model: &BaseClassifier,
    eval: &Dataset,
    specs: &[AttackSpec],
    inference_seed: u64,
) -> Result<(MetricsRecord, Vec<SampleOutcome>)> {
    let clean = clean_accuracy(bank, model, eval, inference_seed)?;
    let mut attacks = Vec::with_capacity(specs.len());
    let mut all = Vec::new();
    let mut timings = BTreeMap::new();
    for spec in specs {
        let t = Instant::now();
        let outcomes = attack_dataset(bank, model, eval, spec, inference_seed)?;
        let label = attack_label(spec);
        timings.insert(format!("attack:{label}"), t.elapsed().as_secs_f64());
        attacks.push(AttackMetric { label, spec: spec.clone(), robust_accuracy: robust_from(&outcomes) });
        all.extend(outcomes);
    }
    let record = MetricsRecord {
        id: String::new(),
        seed: inference_seed,
        n_eval: eval.len(),
        base_accuracy: None,
        clean_accuracy: clean,
        attacks,
        consensus: None,
        timings,
    };
    Ok((record, all))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub base_forward_s: f64,
    pub ensemble_forward_s: f64,
    pub ratio: f64,
    pub params_per_filter: usize,
    /// Parameter bytes of one filter at double precision.
    pub param_bytes: usize,
}

/// Median wall-clock of a base forward pass against a sampled-filter forward pass.
pub fn measure_overhead(bank: &FilterBank, model: &BaseClassifier, n_trials: usize) -> Result<Overhead> {
    if n_trials < 100 {
        return Err(HarnessError::Config(format!("overhead needs at least 100 trials, got {n_trials}")));
    }
    let x = Tensor::full(model.image_shape(), 0.5);
    let base = |_: u64| Ok::<_, HarnessError>(model.logits(&x)?);
    let ens = |t: u64| Ok::<_, HarnessError>(ensemble_forward(bank, model, &x, PathSelect::Sample { seed: 0, stream: t })?);
    base(0)?;
    ens(0)?;
    // Interleaved trials.
    let (mut tb, mut te) = (Vec::with_capacity(n_trials), Vec::with_capacity(n_trials));
    for t in 0..n_trials as u64 {
        let start = Instant::now();
        std::hint::black_box(base(t)?);
        tb.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        std::hint::black_box(ens(t)?);
        te.push(start.elapsed().as_secs_f64());
    }
    let (base, ens) = (diagnostics::percentile(&tb, 0.5), diagnostics::percentile(&te, 0.5));
    let params_per_filter = bank.param_count() / bank.len();
    Ok(Overhead {
        base_forward_s: base,
        ensemble_forward_s: ens,
        ratio: ens / base,
        params_per_filter,
        param_bytes: params_per_filter * std::mem::size_of::<f64>(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Status {
    complete: bool,
    failed_stage: Option<String>,
    error: Option<String>,
}

pub struct RunOutput {
    pub record: MetricsRecord,
    pub dir: PathBuf,
    pub model: BaseClassifier,
    pub bank: FilterBank,
    pub train_log: Vec<EpochLog>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    timings.insert(name.to_owned(), t.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs the whole pipeline and writes its artifacts under `config.output_dir`.
///
/// On failure a `status.json` naming the failed stage is left next to
/// whatever outputs were already written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).stage("setup")?;
    let status = dir.join(STATUS);
    if status.exists() {
        fs::remove_file(&status).stage("setup")?;
    }
    match run_stages(config, &dir) {
        Ok(out) => {
            write_json(&status, &Status { complete: true, failed_stage: None, error: None })?;
            Ok(out)
        }
        Err(e) => {
            let failed_stage = match &e {
                HarnessError::Stage { stage, .. } => Some(stage.to_string()),
                _ => None,
            };
            let _ = write_json(&status, &Status { complete: false, failed_stage, error: Some(e.to_string()) });
            Err(e)
        }
    }
}

fn run_stages(config: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let cfg = config.resolved();
    cfg.validate().stage("config")?;
    write_json(&dir.join(MANIFEST), &Manifest { version: env!("CARGO_PKG_VERSION").into(), config: cfg.clone() }).stage("manifest")?;

    let mut timings = BTreeMap::new();
    let (train, eval) = timed(&mut timings, "dataset", || generate_synthetic_dataset(&cfg.dataset)).stage("dataset")?;
    let shape = cfg.dataset.image_shape();

    let model = timed(&mut timings, "pretrain", || {
        let widths = BaseWidths { conv1: cfg.model.conv1, conv2: cfg.model.conv2 };
        let m = BaseClassifier::with_widths(&shape, cfg.dataset.classes, widths, cfg.model.seed)?;
        Ok(pretrain_and_freeze(m, &train, cfg.model.pretrain_epochs, cfg.model.pretrain_lr, cfg.model.seed)?)
    })
    .stage("pretrain")?;
    let base_accuracy = model.accuracy(&eval).stage("pretrain")?;

    let (bank, log) = timed(&mut timings, "train", || {
        let init = FilterBank::with_hidden(cfg.bank.arch, cfg.bank.k, cfg.bank.hidden, &shape, cfg.bank.seed)?;
        Ok(train_drift(&model, &init, &train, &cfg.train)?)
    })
    .stage("train")?;

    let mut csv = String::from(EpochLog::CSV_HEADER);
    csv.push('\n');
    for l in &log {
        csv.push_str(&l.csv_row());
        csv.push('\n');
    }
    fs::write(dir.join(TRAIN_LOG), csv).stage("checkpoint")?;
    Checkpoint::new(model.clone(), bank.clone()).save(&dir.join(CHECKPOINT)).stage("checkpoint")?;

    let (mut record, outcomes) =
        timed(&mut timings, "attacks", || evaluate_with_outcomes(&bank, &model, &eval, &cfg.attacks, cfg.inference_seed)).stage("attacks")?;
    let mut csv = String::from(SampleOutcome::CSV_HEADER);
    csv.push('\n');
    for o in &outcomes {
        csv.push_str(&o.csv_row());
        csv.push('\n');
    }
    fs::write(dir.join(ATTACKS_CSV), csv).stage("attacks")?;

    let consensus = timed(&mut timings, "diagnostics", || run_diagnostics(&cfg, &bank, &model, &eval, &dir.join(DIAGNOSTICS_DIR))).stage("diagnostics")?;

    record.timings.extend(timings);
    record.id = cfg.id.clone();
    record.seed = cfg.seed;
    record.base_accuracy = Some(base_accuracy);
    record.consensus = consensus;
    write_json(&dir.join(METRICS), &record).stage("report")?;
    Ok(RunOutput { record, dir: dir.to_path_buf(), model, bank, train_log: log })
}

fn run_diagnostics(cfg: &ExperimentConfig, bank: &FilterBank, model: &BaseClassifier, eval: &Dataset, out: &Path) -> Result<Option<ConsensusSummary>> {
    let d = &cfg.diagnostics;
    if !d.any() {
        return Ok(None);
    }
    fs::create_dir_all(out)?;
    let subset = eval.head(d.samples.min(eval.len()));
    let mut summary = None;
    if d.consensus {
        let r = diagnostics::consensus(bank, model, &subset, ConsensusMode::Exact)?;
        write_json(&out.join("consensus.json"), &r)?;
        summary = Some(ConsensusSummary { mean_off_diagonal: r.mean_off_diagonal(), gamma: r.gamma.clone(), n_samples: r.n_samples });
    }
    if d.mismatch {
        let mut o = EotOracle::new(bank, model, d.eot_samples, true, false, d.seed)?;
        let m = diagnostics::directional_mismatch(&mut o, &subset, &d.etas, d.directions, d.seed)?;
        write_json(&out.join("mismatch.json"), &m)?;
    }
    if d.gradnorm {
        let mut o = EotOracle::new(bank, model, d.eot_samples, true, false, d.seed)?;
        let s: Summary = diagnostics::gradient_norm_stats(&mut o, &subset)?;
        write_json(&out.join("gradnorm.json"), &s)?;
    }
    if d.transfer {
        let spec = AttackSpec { seed: d.seed, ..AttackSpec::default() };
        let t = diagnostics::transfer_matrix(bank, model, &subset, &spec)?;
        write_json(&out.join("transfer.json"), &t)?;
    }
    if d.probes && bank.len() >= 2 {
        let xs = &subset.images[..subset.len().min(2)];
        let p = diagnostics::probe_variance_study(bank, xs, &d.probe_counts, d.probe_trials, d.probe_eps, d.seed)?;
        write_json(&out.join("probes.json"), &p)?;
    }
    if d.landscape {
        let mut o = EotOracle::new(bank, model, d.eot_samples, true, false, d.seed)?;
        let g = diagnostics::loss_landscape(&mut o, &subset.images[0], subset.labels[0], d.tau, d.grid, d.seed, 0)?;
        fs::write(out.join("landscape.csv"), g.to_csv())?;
    }
    if d.overhead {
        write_json(&out.join("overhead.json"), &measure_overhead(bank, model, d.overhead_trials)?)?;
    }
    Ok(summary)
}

/// Loads the resolved config recorded in a run's manifest.
pub fn load_manifest(path: &Path) -> Result<ExperimentConfig> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(m.config)
}

/// Collects every `metrics.json` at or one level below `dir`, sorted by path.
pub fn collect_metrics(dir: &Path) -> Result<Vec<(PathBuf, MetricsRecord)>> {
    let mut paths = Vec::new();
    if dir.join(METRICS).is_file() {
        paths.push(dir.join(METRICS));
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path().join(METRICS);
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let r: MetricsRecord = serde_json::from_str(&fs::read_to_string(&p)?)?;
            Ok((p, r))
        })
        .collect()
}

/// Plain-text summary table: one row per run, one column per attack label.
pub fn report_table(records: &[(PathBuf, MetricsRecord)]) -> String {
    let mut labels: Vec<String> = Vec::new();
    for (_, r) in records {
        for a in &r.attacks {
            if !labels.contains(&a.label) {
                labels.push(a.label.clone());
            }
        }
    }
    let mut header = vec!["id".to_owned(), "seed".into(), "base".into(), "clean".into(), "gamma".into()];
    header.extend(labels.iter().cloned());
    let mut rows = vec![header];
    let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.prec$}"));
    for (_, r) in records {
        let mut row = vec![
            r.id.clone(),
            r.seed.to_string(),
            opt(r.base_accuracy, 1),
            format!("{:.1}", r.clean_accuracy),
            opt(r.consensus.as_ref().map(|c| c.mean_off_diagonal), 4),
        ];
        row.extend(labels.iter().map(|l| opt(r.robust(l), 1)));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    out
}

/// The same table as CSV.
pub fn report_csv(records: &[(PathBuf, MetricsRecord)]) -> String {
    let mut out = String::from("id,seed,base_accuracy,clean_accuracy,gamma_off_diagonal,attack,robust_accuracy\n");
    for (_, r) in records {
        let base = r.base_accuracy.map_or(String::new(), |v| v.to_string());
        let gamma = r.consensus.as_ref().map_or(String::new(), |c| c.mean_off_diagonal.to_string());
        for a in &r.attacks {
            out.push_str(&format!("{},{},{},{},{},{},{}\n", r.id, r.seed, base, r.clean_accuracy, gamma, a.label, a.robust_accuracy));
        }
    }
    out
}
