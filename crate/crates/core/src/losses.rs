//! Consensus-breaking objective: clean cross-entropy, Jacobian separation,
//! logit-VJP separation and the base-model adversarial term.
//!
//! The separation terms are built from VJPs recorded on the tape with
//! [`Tape::vjp_graph`], so their gradients with respect to filter parameters
//! come out of an ordinary backward pass.

use drift_tensor::{NodeRef, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{contract, domain, DriftError, Result};
use crate::models::{BaseClassifier, BoundBase, BoundFilter, FilterBank};
use crate::rng;

/// Floor added to the cosine denominator.
pub const COS_EPS: f64 = 1e-12;
/// Vectors shorter than this are treated as carrying no direction.
pub const COS_MIN_NORM: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_js: f64,
    pub beta_lvjp: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_js: 0.5,
            beta_lvjp: 0.5,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta_js, self.beta_lvjp, self.lambda_adv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(domain(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub p_v: usize,
    pub p_w: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { p_v: 5, p_w: 5, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_v == 0 || self.p_w == 0 {
            return Err(domain("probe counts must be at least 1"));
        }
        Ok(())
    }
}

/// Unit-norm Gaussian probes shared by every filter pair within a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Probes {
    /// Probes in filter-output (image) space.
    pub v: Vec<Tensor>,
    /// Probes in logit space.
    pub w: Vec<Tensor>,
}

impl Probes {
    pub fn draw(cfg: &ProbeConfig, image_shape: &[usize], num_classes: usize, stream: &[u64]) -> Self {
        let mut r = rng::stream(cfg.seed, stream);
        let v = (0..cfg.p_v).map(|_| rng::unit_gaussian(&mut r, image_shape)).collect();
        let w = (0..cfg.p_w).map(|_| rng::unit_gaussian(&mut r, &[num_classes])).collect();
        Self { v, w }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub js: f64,
    pub lvjp: f64,
    pub adv: f64,
    pub total: f64,
}

/// Raw component values; `None` marks a component that is switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub js: Option<f64>,
    pub lvjp: Option<f64>,
    pub adv: Option<f64>,
}

/// Weighted objective. Inactive components contribute exactly zero.
pub fn total_loss(weights: &LossWeights, c: &LossComponents) -> Result<LossBreakdown> {
    let js = c.js.unwrap_or(0.0);
    let lvjp = c.lvjp.unwrap_or(0.0);
    let adv = c.adv.unwrap_or(0.0);
    for (name, v) in [("ce", c.ce), ("js", js), ("lvjp", lvjp), ("adv", adv)] {
        if !v.is_finite() {
            return Err(DriftError::Divergence(format!("non-finite {name} component")));
        }
    }
    let mut total = weights.alpha * c.ce;
    if c.js.is_some() {
        total += weights.beta_js * js;
    }
    if c.lvjp.is_some() {
        total += weights.beta_lvjp * lvjp;
    }
    if c.adv.is_some() {
        total += weights.lambda_adv * adv;
    }
    Ok(LossBreakdown { ce: c.ce, js, lvjp, adv, total })
}

/// Squared cosine similarity with a degenerate-norm guard.
pub fn cos_sq(a: &Tensor, b: &Tensor) -> f64 {
    let (na, nb) = (a.norm_l2(), b.norm_l2());
    if na < COS_MIN_NORM || nb < COS_MIN_NORM {
        return 0.0;
    }
    let c = a.dot(b) / (na * nb + COS_EPS);
    c * c
}

/// Differentiable [`cos_sq`]; the guard yields a constant zero node.
pub fn cos_sq_node(tape: &mut Tape, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
    let (na, nb) = (tape.value(a)?.norm_l2(), tape.value(b)?.norm_l2());
    if na < COS_MIN_NORM || nb < COS_MIN_NORM {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let ab = tape.dot(a, b)?;
    let aa = tape.dot(a, a)?;
    let bb = tape.dot(b, b)?;
    let na = tape.sqrt(aa)?;
    let nb = tape.sqrt(bb)?;
    let den = tape.mul(na, nb)?;
    let den = tape.add_const(den, COS_EPS)?;
    let c = tape.div(ab, den)?;
    Ok(tape.mul(c, c)?)
}

/// Mean of scalar nodes, summed in index order.
pub fn mean_node(tape: &mut Tape, xs: &[NodeRef]) -> Result<NodeRef> {
    let (first, rest) = xs.split_first().ok_or_else(|| domain("mean of an empty list"))?;
    let mut acc = *first;
    for &x in rest {
        acc = tape.add(acc, x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64)?)
}

/// Jacobian-separation term for one input: mean over pairs `i < j` and
/// probes `v` of `cos^2(J_i^T v, J_j^T v)`, where `J_i` is the Jacobian of
/// `outputs[i]` with respect to `input`. `None` when fewer than two outputs.
pub fn js_on_tape(tape: &mut Tape, input: NodeRef, outputs: &[NodeRef], probes_v: &[Tensor]) -> Result<Option<NodeRef>> {
    if outputs.len() < 2 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for v in probes_v {
        let vn = tape.leaf(v.clone());
        let mut vjps = Vec::with_capacity(outputs.len());
        for &o in outputs {
            vjps.push(tape.vjp_graph(o, vn, &[input])?[0]);
        }
        for i in 0..vjps.len() {
            for j in i + 1..vjps.len() {
                terms.push(cos_sq_node(tape, vjps[i], vjps[j])?);
            }
        }
    }
    Ok(Some(mean_node(tape, &terms)?))
}

/// Logit-VJP separation term for one input.
///
/// Pairwise group: mean over `i < j` and probes `w` of
/// `cos^2(grad <z_i, w>, grad <z_j, w>)`. Identity group (when
/// `identity_logits` is given): mean over `i` of the same against the
/// unfiltered path. Non-empty groups are averaged with equal weight; `None`
/// when both are empty.
pub fn lvjp_on_tape(
    tape: &mut Tape,
    input: NodeRef,
    logits: &[NodeRef],
    identity_logits: Option<NodeRef>,
    probes_w: &[Tensor],
) -> Result<Option<NodeRef>> {
    let mut pair_terms = Vec::new();
    let mut id_terms = Vec::new();
    for w in probes_w {
        let wn = tape.leaf(w.clone());
        let mut grads = Vec::with_capacity(logits.len());
        for &z in logits {
            grads.push(tape.vjp_graph(z, wn, &[input])?[0]);
        }
        for i in 0..grads.len() {
            for j in i + 1..grads.len() {
                pair_terms.push(cos_sq_node(tape, grads[i], grads[j])?);
            }
        }
        if let Some(zid) = identity_logits {
            let gid = tape.vjp_graph(zid, wn, &[input])?[0];
            for &g in &grads {
                id_terms.push(cos_sq_node(tape, g, gid)?);
            }
        }
    }
    let groups: Vec<NodeRef> = [pair_terms, id_terms]
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| mean_node(tape, t))
        .collect::<Result<_>>()?;
    if groups.is_empty() {
        return Ok(None);
    }
    Ok(Some(mean_node(tape, &groups)?))
}

/// Which optional terms a per-sample objective includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub js: bool,
    pub lvjp: bool,
    pub adv: bool,
    pub include_identity: bool,
}

impl ActiveTerms {
    pub const ALL: ActiveTerms = ActiveTerms { js: true, lvjp: true, adv: true, include_identity: true };
    pub const CE_ONLY: ActiveTerms = ActiveTerms { js: false, lvjp: false, adv: false, include_identity: true };
}

/// Per-sample component nodes. Inactive terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct SampleTerms {
    pub ce: NodeRef,
    pub js: Option<NodeRef>,
    pub lvjp: Option<NodeRef>,
    pub adv: Option<NodeRef>,
}

/// Records every active loss component for one labelled input.
///
/// `x_adv` is the base-model adversarial input used by the adversarial term.
pub fn sample_terms(
    tape: &mut Tape,
    filters: &[BoundFilter],
    base: &BoundBase,
    x: &Tensor,
    y: usize,
    probes: &Probes,
    x_adv: Option<&Tensor>,
    active: ActiveTerms,
) -> Result<SampleTerms> {
    let xn = tape.leaf(x.clone());
    let mut filtered = Vec::with_capacity(filters.len());
    let mut logits = Vec::with_capacity(filters.len());
    let mut ces = Vec::with_capacity(filters.len());
    for f in filters {
        let u = f.forward(tape, xn)?;
        let z = base.forward(tape, u)?;
        ces.push(tape.softmax_cross_entropy(z, y)?);
        filtered.push(u);
        logits.push(z);
    }
    let ce = mean_node(tape, &ces)?;
    let js = if active.js { js_on_tape(tape, xn, &filtered, &probes.v)? } else { None };
    let lvjp = if active.lvjp {
        let zid = if active.include_identity { Some(base.forward(tape, xn)?) } else { None };
        lvjp_on_tape(tape, xn, &logits, zid, &probes.w)?
    } else {
        None
    };
    let adv = match (active.adv, x_adv) {
        (true, Some(xa)) => Some(adv_on_tape(tape, filters, base, xa, y)?),
        (true, None) => return Err(contract("adversarial term requested without an adversarial input")),
        _ => None,
    };
    Ok(SampleTerms { ce, js, lvjp, adv })
}

/// `max_i CE(M(f_i(x_adv)), y)`; the gradient flows through the arg-max filter.
pub fn adv_on_tape(tape: &mut Tape, filters: &[BoundFilter], base: &BoundBase, x_adv: &Tensor, y: usize) -> Result<NodeRef> {
    let xa = tape.leaf(x_adv.clone());
    let mut best: Option<(f64, NodeRef)> = None;
    for f in filters {
        let u = f.forward(tape, xa)?;
        let z = base.forward(tape, u)?;
        let l = tape.softmax_cross_entropy(z, y)?;
        let v = tape.value(l)?.item();
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, l));
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| domain("adversarial term needs at least one filter"))
}

fn bind_all(tape: &mut Tape, bank: &FilterBank) -> Vec<BoundFilter> {
    bank.filters().iter().map(|f| f.bind(tape)).collect()
}

fn value(tape: &Tape, n: NodeRef) -> Result<f64> {
    Ok(tape.value(n)?.item())
}

/// Mean over the batch of the mean over filters of clean cross-entropy.
pub fn loss_ce(bank: &FilterBank, model: &BaseClassifier, batch: &Dataset) -> Result<f64> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let mut acc = 0.0;
    for (x, &y) in batch.images.iter().zip(&batch.labels) {
        let mut tape = Tape::new();
        let filters = bind_all(&mut tape, bank);
        let base = model.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let mut ces = Vec::new();
        for f in &filters {
            let u = f.forward(&mut tape, xn)?;
            let z = base.forward(&mut tape, u)?;
            ces.push(tape.softmax_cross_entropy(z, y)?);
        }
        let m = mean_node(&mut tape, &ces)?;
        acc += value(&tape, m)?;
    }
    Ok(acc / batch.len() as f64)
}

/// Batch-mean Jacobian-separation loss with probes drawn from `probes.seed`.
/// `Ok(None)` signals that the term is skipped (fewer than two filters).
pub fn loss_js(bank: &FilterBank, x_batch: &[Tensor], probes: &ProbeConfig) -> Result<Option<f64>> {
    probes.validate()?;
    let p = Probes::draw(probes, bank.image_shape(), 1, &[0x15]);
    loss_js_with(bank, x_batch, &p.v)
}

pub fn loss_js_with(bank: &FilterBank, x_batch: &[Tensor], probes_v: &[Tensor]) -> Result<Option<f64>> {
    if bank.len() < 2 {
        return Ok(None);
    }
    if x_batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let mut acc = 0.0;
    for x in x_batch {
        let mut tape = Tape::new();
        let filters = bind_all(&mut tape, bank);
        let xn = tape.leaf(x.clone());
        let outs = filters.iter().map(|f| f.forward(&mut tape, xn)).collect::<Result<Vec<_>>>()?;
        let js = js_on_tape(&mut tape, xn, &outs, probes_v)?.expect("at least two filters");
        acc += value(&tape, js)?;
    }
    Ok(Some(acc / x_batch.len() as f64))
}

/// Batch-mean logit-VJP separation loss; zero when there is nothing to compare.
pub fn loss_lvjp(bank: &FilterBank, model: &BaseClassifier, x_batch: &[Tensor], probes: &ProbeConfig, include_identity: bool) -> Result<f64> {
    probes.validate()?;
    let p = Probes::draw(probes, bank.image_shape(), model.num_classes(), &[0x1f]);
    loss_lvjp_with(bank, model, x_batch, &p.w, include_identity)
}

pub fn loss_lvjp_with(bank: &FilterBank, model: &BaseClassifier, x_batch: &[Tensor], probes_w: &[Tensor], include_identity: bool) -> Result<f64> {
    if x_batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let mut acc = 0.0;
    for x in x_batch {
        let mut tape = Tape::new();
        let filters = bind_all(&mut tape, bank);
        let base = model.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let mut logits = Vec::new();
        for f in &filters {
            let u = f.forward(&mut tape, xn)?;
            logits.push(base.forward(&mut tape, u)?);
        }
        let zid = if include_identity { Some(base.forward(&mut tape, xn)?) } else { None };
        if let Some(l) = lvjp_on_tape(&mut tape, xn, &logits, zid, probes_w)? {
            acc += value(&tape, l)?;
        }
    }
    Ok(acc / x_batch.len() as f64)
}

/// Clips `x + delta` to the pixel box after checking the l-inf budget.
pub fn perturbed(x: &Tensor, delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if delta.shape() != x.shape() {
        return Err(contract("perturbation shape differs from input shape"));
    }
    if delta.max_abs() > epsilon {
        return Err(contract(format!("perturbation l-inf norm {} exceeds budget {epsilon}", delta.max_abs())));
    }
    Ok(x.zip_map(delta, |a, d| (a + d).clamp(0.0, 1.0)))
}

/// Batch mean of the worst filter's cross-entropy on `x + delta`.
pub fn loss_adv(bank: &FilterBank, model: &BaseClassifier, batch: &Dataset, deltas: &[Tensor], epsilon: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    if deltas.len() != batch.len() {
        return Err(contract("one perturbation per sample is required"));
    }
    let mut acc = 0.0;
    for ((x, &y), d) in batch.images.iter().zip(&batch.labels).zip(deltas) {
        let xa = perturbed(x, d, epsilon)?;
        let mut tape = Tape::new();
        let filters = bind_all(&mut tape, bank);
        let base = model.bind(&mut tape);
        let l = adv_on_tape(&mut tape, &filters, &base, &xa, y)?;
        acc += value(&tape, l)?;
    }
    Ok(acc / batch.len() as f64)
}
