//! Joint optimisation of the filter bank against the composite objective.

use drift_tensor::{Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackKind, AttackSpec, Norm, PipelineOracle};
use crate::data::Dataset;
use crate::error::{contract, domain, DriftError, Result};
use crate::losses::{sample_terms, ActiveTerms, LossWeights, ProbeConfig, Probes};
use crate::models::{BaseClassifier, FilterBank};
use crate::rng;

/// Adaptive-moment optimiser with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    state: Option<OptimizerState>,
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, betas: (0.9, 0.999), eps: 1e-8, state: None }
    }

    pub fn state(&self) -> Option<&OptimizerState> {
        self.state.as_ref()
    }

    /// One update. Gradients must already be finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(contract("gradient shapes do not match parameter shapes"));
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(contract("non-finite gradient reached the optimiser; sanitize first"));
        }
        let st = self.state.get_or_insert_with(|| OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        });
        if st.m.len() != params.len() || st.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return Err(contract("optimiser state does not match parameters"));
        }
        st.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(st.step as i32);
        let c2 = 1.0 - b2.powi(st.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] * decay - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Replaces NaN and infinite entries by zero; returns how many were replaced.
pub fn sanitize_gradients(grads: &mut [Tensor]) -> usize {
    let mut n = 0;
    for g in grads {
        for v in g.data_mut() {
            if !v.is_finite() {
                *v = 0.0;
                n += 1;
            }
        }
    }
    n
}

/// Global L2 norm across all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(domain(format!("clip norm must be positive, got {max_norm}")));
    }
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(n)
}

/// Base-only PGD used to craft the adversarial term's inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerPgd {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / steps` when absent.
    pub step_size: Option<f64>,
}

impl Default for InnerPgd {
    fn default() -> Self {
        Self { epsilon: 4.0 / 255.0, steps: 10, step_size: None }
    }
}

impl InnerPgd {
    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / self.steps.max(1) as f64)
    }

    pub fn spec(&self) -> AttackSpec {
        AttackSpec {
            kind: AttackKind::Pgd,
            norm: Norm::Linf,
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size().max(f64::MIN_POSITIVE),
            eot_samples: 1,
            ..AttackSpec::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warmups {
    pub js: usize,
    pub lvjp: usize,
    pub adv: usize,
}

impl Default for Warmups {
    fn default() -> Self {
        Self { js: 5, lvjp: 5, adv: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub warmups: Warmups,
    pub inner_pgd: InnerPgd,
    pub probes: ProbeConfig,
    /// Include the unfiltered path in the logit-VJP term.
    pub include_identity: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            warmups: Warmups::default(),
            inner_pgd: InnerPgd::default(),
            probes: ProbeConfig::default(),
            include_identity: true,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.probes.validate()?;
        if self.batch_size == 0 {
            return Err(domain("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(domain("learning rate must be positive and weight decay nonnegative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(domain("clip norm must be positive"));
        }
        if self.inner_pgd.steps == 0 || !(self.inner_pgd.epsilon >= 0.0) || !(self.inner_pgd.step_size() > 0.0 || self.inner_pgd.epsilon == 0.0) {
            return Err(domain("inner PGD needs at least one step and a nonnegative budget"));
        }
        Ok(())
    }

    /// Terms switched on in 1-based `epoch`.
    pub fn active_terms(&self, epoch: usize, k: usize) -> ActiveTerms {
        ActiveTerms {
            js: epoch > self.warmups.js && k >= 2 && self.weights.beta_js > 0.0,
            lvjp: epoch > self.warmups.lvjp && self.weights.beta_lvjp > 0.0,
            adv: epoch > self.warmups.adv && self.weights.lambda_adv > 0.0,
            include_identity: self.include_identity,
        }
    }
}

/// Per-epoch means of the loss components and optimiser telemetry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub js: f64,
    pub lvjp: f64,
    pub adv: f64,
    pub total: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub n_sanitized: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,ce,js,lvjp,adv,total,grad_norm,n_sanitized";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.ce, self.js, self.lvjp, self.adv, self.total, self.grad_norm, self.n_sanitized
        )
    }
}

struct SampleOut {
    values: [f64; 5],
    grads: Vec<Tensor>,
}

fn sample_step(
    bank: &FilterBank,
    model: &BaseClassifier,
    x: &Tensor,
    y: usize,
    probes: &Probes,
    cfg: &TrainConfig,
    active: ActiveTerms,
) -> Result<SampleOut> {
    let x_adv = if active.adv {
        let mut oracle = PipelineOracle::base(model);
        Some(pgd(&mut oracle, x, y, &cfg.inner_pgd.spec())?.x_adv)
    } else {
        None
    };
    let mut tape = Tape::new();
    let bound: Vec<_> = bank.filters().iter().map(|f| f.bind(&mut tape)).collect();
    let base = model.bind(&mut tape);
    let t = sample_terms(&mut tape, &bound, &base, x, y, probes, x_adv.as_ref(), active)?;
    let w = &cfg.weights;
    let mut total = tape.scale(t.ce, w.alpha)?;
    let mut values = [tape.value(t.ce)?.item(), 0.0, 0.0, 0.0, 0.0];
    for (slot, node, weight) in [(1, t.js, w.beta_js), (2, t.lvjp, w.beta_lvjp), (3, t.adv, w.lambda_adv)] {
        if let Some(n) = node {
            values[slot] = tape.value(n)?.item();
            let s = tape.scale(n, weight)?;
            total = tape.add(total, s)?;
        }
    }
    values[4] = tape.value(total)?.item();
    let wrt: Vec<_> = bound.iter().flat_map(|b| b.params().iter().copied()).collect();
    let grads = tape.grad(total, &wrt)?;
    Ok(SampleOut { values, grads })
}

/// Trains the filters of `bank` against the frozen `model`.
///
/// Returns the trained bank and one log entry per epoch. The base model is
/// never modified.
pub fn train_drift(model: &BaseClassifier, bank: &FilterBank, data: &Dataset, cfg: &TrainConfig) -> Result<(FilterBank, Vec<EpochLog>)> {
    if !model.is_frozen() {
        return Err(contract("base model must be frozen before filter training"));
    }
    if data.is_empty() {
        return Err(domain("training set is empty"));
    }
    if bank.image_shape() != model.image_shape() {
        return Err(domain("bank and model image shapes differ"));
    }
    cfg.validate()?;
    let mut bank = bank.clone();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let active = cfg.active_terms(epoch, bank.len());
        let mut r = rng::stream(cfg.seed, &[0x5f1e, epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let mut sums = [0.0; 5];
        let mut counted = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut batches = 0usize;
        let mut n_sanitized = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let probes = Probes::draw(&cfg.probes, bank.image_shape(), model.num_classes(), &[epoch as u64, b as u64]);
            let outs: Vec<SampleOut> = chunk
                .par_iter()
                .map(|&i| sample_step(&bank, model, &data.images[i], data.labels[i], &probes, cfg, active))
                .collect::<Result<_>>()?;
            let mut grads: Vec<Tensor> = bank.filters().iter().flat_map(|f| f.params().iter().map(|p| Tensor::zeros(p.shape()))).collect();
            let inv = 1.0 / chunk.len() as f64;
            for o in &outs {
                if o.values.iter().all(|v| v.is_finite()) {
                    for (s, v) in sums.iter_mut().zip(o.values) {
                        *s += v;
                    }
                    counted += 1;
                }
                for (acc, g) in grads.iter_mut().zip(&o.grads) {
                    acc.axpy(inv, g);
                }
            }
            n_sanitized += sanitize_gradients(&mut grads);
            grad_norm_sum += clip_gradients(&mut grads, cfg.clip_norm)?;
            batches += 1;
            let mut params: Vec<Tensor> = bank.filters().iter().flat_map(|f| f.params().iter().cloned()).collect();
            opt.step(&mut params, &grads)?;
            let mut it = params.into_iter();
            for f in bank.filters_mut() {
                for p in f.params_mut() {
                    *p = it.next().expect("parameter count is fixed");
                }
            }
        }
        if counted == 0 {
            return Err(DriftError::Divergence(format!("every loss in epoch {epoch} was non-finite")));
        }
        let c = counted as f64;
        logs.push(EpochLog {
            epoch,
            ce: sums[0] / c,
            js: sums[1] / c,
            lvjp: sums[2] / c,
            adv: sums[3] / c,
            total: sums[4] / c,
            grad_norm: grad_norm_sum / batches as f64,
            n_sanitized,
        });
    }
    Ok((bank, logs))
}
