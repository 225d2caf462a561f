//! First-order and score-based adversaries, plus the gradient estimators
//! used against the stochastic ensemble.

use drift_tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::models::{BaseClassifier, Filter, FilterBank};
use crate::rng;
use crate::training::sanitize_gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Mim,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
            AttackKind::Square => "square",
        })
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum_decay: f64,
    pub eot_samples: usize,
    pub bpda_identity: bool,
    pub crn: bool,
    pub query_budget: usize,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        let epsilon = 4.0 / 255.0;
        Self {
            kind: AttackKind::Pgd,
            norm: Norm::Linf,
            epsilon,
            steps: 40,
            step_size: epsilon / 10.0,
            momentum_decay: 1.0,
            eot_samples: 5,
            bpda_identity: false,
            crn: true,
            query_budget: 5000,
            seed: 0,
        }
    }
}

impl AttackSpec {
    /// Defaults with the budget replaced and the step size rescaled to `eps / 10`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, step_size: epsilon / 10.0, ..Self::default() }
    }

    /// A zero budget is accepted, with any step size: it is the no-attack
    /// reference point.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(domain(format!("epsilon must be finite and nonnegative, got {}", self.epsilon)));
        }
        if self.kind != AttackKind::Square {
            if self.steps == 0 {
                return Err(domain("attack needs at least one step"));
            }
            if self.epsilon > 0.0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
                return Err(domain(format!("step size must be positive, got {}", self.step_size)));
            }
            if self.eot_samples == 0 {
                return Err(domain("eot_samples must be at least 1"));
            }
        }
        if self.kind == AttackKind::Square && self.norm != Norm::Linf {
            return Err(domain("square attack is implemented for the linf ball only"));
        }
        if !self.momentum_decay.is_finite() || self.momentum_decay < 0.0 {
            return Err(domain("momentum decay must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Copy of the spec whose seed is specialised to one sample.
    pub fn for_sample(&self, sample_id: u64) -> Self {
        Self { seed: rng::derive_seed(self.seed, &[0xa77, sample_id]), ..self.clone() }
    }
}

/// Loss and input gradient of some pipeline under a declared threat model.
///
/// `step` is the attack iteration; oracles with common randomness draw their
/// randomness as a pure function of it.
pub trait GradientOracle {
    fn loss_and_grad(&mut self, x: &Tensor, y: usize, step: u64) -> Result<(f64, Tensor)>;

    fn loss(&mut self, x: &Tensor, y: usize, step: u64) -> Result<f64> {
        Ok(self.loss_and_grad(x, y, step)?.0)
    }
}

/// Adapts a closure into an oracle.
pub struct FnOracle<F>(pub F);

impl<F> GradientOracle for FnOracle<F>
where
    F: FnMut(&Tensor, usize, u64) -> Result<(f64, Tensor)>,
{
    fn loss_and_grad(&mut self, x: &Tensor, y: usize, step: u64) -> Result<(f64, Tensor)> {
        (self.0)(x, y, step)
    }
}

/// Cross-entropy of `M(f(x))` and its gradient in `x`.
///
/// With `bpda` the filter's backward pass is replaced by the identity, so the
/// gradient is `grad_u CE(M(u), y)` at `u = f(x)`.
pub fn pipeline_loss_grad(model: &BaseClassifier, filter: Option<&Filter>, x: &Tensor, y: usize, bpda: bool) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let m = model.bind(&mut tape);
    let xn = tape.leaf(x.clone());
    let (u, wrt) = match filter {
        None => (xn, xn),
        Some(f) if bpda => {
            let u = tape.leaf(f.apply(x)?);
            (u, u)
        }
        Some(f) => {
            let b = f.bind(&mut tape);
            (b.forward(&mut tape, xn)?, xn)
        }
    };
    let z = m.forward(&mut tape, u)?;
    let l = tape.softmax_cross_entropy(z, y)?;
    let loss = tape.value(l)?.item();
    let g = tape.grad(l, &[wrt])?.pop().expect("one wrt node");
    Ok((loss, g))
}

pub fn pipeline_loss(model: &BaseClassifier, filter: Option<&Filter>, x: &Tensor, y: usize) -> Result<f64> {
    let u = match filter {
        Some(f) => f.apply(x)?,
        None => x.clone(),
    };
    let z = model.logits(&u)?;
    Ok(drift_tensor::kernels::cross_entropy(z.data(), y))
}

/// A fixed pipeline: the base model alone or one filter followed by it.
pub struct PipelineOracle<'a> {
    pub model: &'a BaseClassifier,
    pub filter: Option<&'a Filter>,
    pub bpda: bool,
}

impl<'a> PipelineOracle<'a> {
    pub fn base(model: &'a BaseClassifier) -> Self {
        Self { model, filter: None, bpda: false }
    }

    pub fn filtered(bank: &'a FilterBank, model: &'a BaseClassifier, index: usize) -> Result<Self> {
        let filter = bank.filters().get(index).ok_or_else(|| domain(format!("filter index {index} out of range")))?;
        Ok(Self { model, filter: Some(filter), bpda: false })
    }
}

impl GradientOracle for PipelineOracle<'_> {
    fn loss_and_grad(&mut self, x: &Tensor, y: usize, _step: u64) -> Result<(f64, Tensor)> {
        pipeline_loss_grad(self.model, self.filter, x, y, self.bpda)
    }

    fn loss(&mut self, x: &Tensor, y: usize, _step: u64) -> Result<f64> {
        pipeline_loss(self.model, self.filter, x, y)
    }
}

/// Monte-Carlo expectation over uniformly drawn filters.
///
/// With `crn` the draws at step `s` are a pure function of `(seed, s)`;
/// otherwise a private stream seeded once from `seed` advances with every
/// call. Repeated draws of one filter are evaluated once and weighted by
/// their multiplicity, which gives the same average.
pub struct EotOracle<'a> {
    bank: &'a FilterBank,
    model: &'a BaseClassifier,
    samples: usize,
    crn: bool,
    bpda: bool,
    seed: u64,
    private: ChaCha8Rng,
}

impl<'a> EotOracle<'a> {
    pub fn new(bank: &'a FilterBank, model: &'a BaseClassifier, samples: usize, crn: bool, bpda: bool, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(domain("EoT needs at least one sample"));
        }
        Ok(Self { bank, model, samples, crn, bpda, seed, private: rng::stream(seed, &[0xe07]) })
    }

    pub fn from_spec(bank: &'a FilterBank, model: &'a BaseClassifier, spec: &AttackSpec) -> Result<Self> {
        Self::new(bank, model, spec.eot_samples, spec.crn, spec.bpda_identity, spec.seed)
    }

    /// Multiplicity of each filter among this step's draws.
    pub fn draw_counts(&mut self, step: u64) -> Vec<usize> {
        let k = self.bank.len();
        let mut counts = vec![0usize; k];
        if self.crn {
            let mut r = rng::stream(self.seed, &[0xe07, step]);
            for _ in 0..self.samples {
                counts[r.random_range(0..k)] += 1;
            }
        } else {
            for _ in 0..self.samples {
                counts[self.private.random_range(0..k)] += 1;
            }
        }
        counts
    }
}

impl GradientOracle for EotOracle<'_> {
    fn loss_and_grad(&mut self, x: &Tensor, y: usize, step: u64) -> Result<(f64, Tensor)> {
        let counts = self.draw_counts(step);
        let n = self.samples as f64;
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(x.shape());
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let (l, g) = pipeline_loss_grad(self.model, Some(&self.bank.filters()[i]), x, y, self.bpda)?;
            loss += c as f64 / n * l;
            grad.axpy(c as f64 / n, &g);
        }
        Ok((loss, grad))
    }

    fn loss(&mut self, x: &Tensor, y: usize, step: u64) -> Result<f64> {
        let counts = self.draw_counts(step);
        let n = self.samples as f64;
        let mut loss = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                loss += c as f64 / n * pipeline_loss(self.model, Some(&self.bank.filters()[i]), x, y)?;
            }
        }
        Ok(loss)
    }
}

/// Mean input gradient over `k_samples` filter draws; a pure function of `seed`.
pub fn eot_gradient(bank: &FilterBank, model: &BaseClassifier, x: &Tensor, y: usize, k_samples: usize, crn: bool, seed: u64) -> Result<Tensor> {
    Ok(EotOracle::new(bank, model, k_samples, crn, false, seed)?.loss_and_grad(x, y, 0)?.1)
}

/// Forward through filter `index`, backward with the identity in its place.
pub fn bpda_gradient(bank: &FilterBank, model: &BaseClassifier, x: &Tensor, y: usize, index: usize) -> Result<Tensor> {
    let f = bank.filters().get(index).ok_or_else(|| domain(format!("filter index {index} out of range")))?;
    Ok(pipeline_loss_grad(model, Some(f), x, y, true)?.1)
}

/// Final iterate of an attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub delta: Tensor,
    /// Gradient entries that were non-finite and replaced by zero.
    pub sanitized: usize,
}

/// Projects `cand` onto the `eps`-ball around `x` intersected with `[0,1]`.
///
/// The returned point satisfies the budget exactly in floating point.
pub fn project(x: &Tensor, cand: &Tensor, eps: f64, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => x.zip_map(cand, |a, c| {
            let mut v = (a + (c - a).clamp(-eps, eps)).clamp(0.0, 1.0);
            while (v - a).abs() > eps {
                v = if v > a { v.next_down() } else { v.next_up() };
            }
            v
        }),
        Norm::L2 => {
            let mut d = cand.sub(x);
            let n = d.norm_l2();
            if n > eps {
                d = d.scale(eps / n);
            }
            let mut out = x.zip_map(&d, |a, dv| (a + dv).clamp(0.0, 1.0));
            // Pull back towards x until rounding leaves the point inside the ball.
            let mut shrink = 1.0;
            while out.sub(x).norm_l2() > eps {
                shrink *= 1.0 - 1e-12;
                out = x.zip_map(&d, |a, dv| (a + dv * shrink).clamp(0.0, 1.0));
            }
            out
        }
    }
}

fn check_input(x: &Tensor, spec: &AttackSpec) -> Result<()> {
    spec.validate()?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(domain("attack input must lie in [0,1]"));
    }
    Ok(())
}

fn finish(x: &Tensor, x_adv: Tensor, sanitized: usize) -> AttackResult {
    let delta = x_adv.sub(x);
    AttackResult { x_adv, delta, sanitized }
}

fn sanitized_grad(g: Tensor) -> (Tensor, usize) {
    let mut gs = [g];
    let n = sanitize_gradients(&mut gs);
    let [g] = gs;
    (g, n)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected gradient ascent on the oracle loss from `delta = 0`.
pub fn pgd(oracle: &mut dyn GradientOracle, x: &Tensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    check_input(x, spec)?;
    let mut xa = x.clone();
    let mut sanitized = 0;
    for t in 0..spec.steps {
        let (g, n) = sanitized_grad(oracle.loss_and_grad(&xa, y, t as u64)?.1);
        sanitized += n;
        let step = match spec.norm {
            Norm::Linf => g.map(|v| spec.step_size * sign(v)),
            Norm::L2 => {
                let gn = g.norm_l2();
                if gn > 0.0 {
                    g.scale(spec.step_size / gn)
                } else {
                    g
                }
            }
        };
        xa = project(x, &xa.add(&step), spec.epsilon, spec.norm);
    }
    Ok(finish(x, xa, sanitized))
}

/// Momentum iterative method: `m <- decay*m + g/|g|_1`, step along `sign(m)`.
pub fn mim(oracle: &mut dyn GradientOracle, x: &Tensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    check_input(x, spec)?;
    let mut xa = x.clone();
    let mut m = Tensor::zeros(x.shape());
    let mut sanitized = 0;
    for t in 0..spec.steps {
        let (g, n) = sanitized_grad(oracle.loss_and_grad(&xa, y, t as u64)?.1);
        sanitized += n;
        let l1 = g.norm_l1();
        m = m.scale(spec.momentum_decay);
        if l1 > 0.0 {
            m.axpy(1.0 / l1, &g);
        }
        let step = match spec.norm {
            Norm::Linf => m.map(|v| spec.step_size * sign(v)),
            Norm::L2 => {
                let mn = m.norm_l2();
                if mn > 0.0 {
                    m.scale(spec.step_size / mn)
                } else {
                    m.clone()
                }
            }
        };
        xa = project(x, &xa.add(&step), spec.epsilon, spec.norm);
    }
    Ok(finish(x, xa, sanitized))
}

/// Outcome of the score-based search.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareResult {
    pub x_adv: Tensor,
    pub delta: Tensor,
    pub success: bool,
    pub queries: usize,
    pub margin: f64,
}

/// Fraction of the image side used for square proposals at query `q`.
pub fn square_side_fraction(q: usize, budget: usize) -> f64 {
    let progress = q as f64 / budget.max(1) as f64;
    if progress < 0.2 {
        0.5
    } else if progress < 0.5 {
        0.25
    } else if progress < 0.8 {
        0.1
    } else {
        0.05
    }
}

/// Greedy random search over square patches set to `+-eps` per channel.
///
/// `score(x, query)` returns the margin (true logit minus best other);
/// a negative margin counts as a misclassification. Only strict margin
/// decreases are accepted.
pub fn square_attack<S>(mut score: S, x: &Tensor, spec: &AttackSpec) -> Result<SquareResult>
where
    S: FnMut(&Tensor, usize) -> Result<f64>,
{
    spec.validate()?;
    let [c, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(domain(format!("square attack needs a [c,h,w] image, got {s:?}"))),
    };
    let unchanged = |margin: f64, queries: usize| SquareResult {
        x_adv: x.clone(),
        delta: Tensor::zeros(x.shape()),
        success: margin < 0.0,
        queries,
        margin,
    };
    if spec.query_budget == 0 {
        return Ok(unchanged(f64::NAN, 0));
    }
    let mut margin = score(x, 0)?;
    let mut queries = 1;
    if margin < 0.0 {
        return Ok(unchanged(margin, queries));
    }
    let mut r = rng::stream(spec.seed, &[0x5a0a]);
    let eps = spec.epsilon;
    let mut best = x.clone();
    let side_px = h.min(w);
    while queries < spec.query_budget && margin >= 0.0 {
        let side = ((square_side_fraction(queries, spec.query_budget) * side_px as f64).round() as usize).clamp(1, side_px);
        let y0 = r.random_range(0..=h - side);
        let x0 = r.random_range(0..=w - side);
        let mut cand = best.clone();
        for ch in 0..c {
            let s = if r.random_bool(0.5) { eps } else { -eps };
            for yy in y0..y0 + side {
                for xx in x0..x0 + side {
                    let i = (ch * h + yy) * w + xx;
                    cand.data_mut()[i] = x.data()[i] + s;
                }
            }
        }
        let cand = project(x, &cand, eps, Norm::Linf);
        let m = score(&cand, queries)?;
        queries += 1;
        if m < margin {
            margin = m;
            best = cand;
        }
    }
    let delta = best.sub(x);
    Ok(SquareResult { x_adv: best, delta, success: margin < 0.0, queries, margin })
}

/// Margin of a logit vector: true-class logit minus the best other logit.
pub fn margin(logits: &Tensor, y: usize) -> f64 {
    let z = logits.data();
    let other = z.iter().enumerate().filter(|(i, _)| *i != y).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    z[y] - other
}

/// PGD or MIM against the ensemble through the EoT oracle, optionally with
/// the identity surrogate for the filters' backward pass.
pub fn adaptive_attack(bank: &FilterBank, model: &BaseClassifier, x: &Tensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    let mut oracle = EotOracle::from_spec(bank, model, spec)?;
    match spec.kind {
        AttackKind::Pgd => pgd(&mut oracle, x, y, spec),
        AttackKind::Mim => mim(&mut oracle, x, y, spec),
        AttackKind::Square => Err(domain("adaptive attack is gradient based; use square_attack")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(c: Tensor) -> FnOracle<impl FnMut(&Tensor, usize, u64) -> Result<(f64, Tensor)>> {
        FnOracle(move |x: &Tensor, _y: usize, _s: u64| Ok((x.dot(&c), c.clone())))
    }

    #[test]
    fn validation() {
        assert!(AttackSpec::default().validate().is_ok());
        assert!(AttackSpec { steps: 0, ..Default::default() }.validate().is_err());
        assert!(AttackSpec { epsilon: -1.0, ..Default::default() }.validate().is_err());
        assert!(AttackSpec { step_size: 0.0, ..Default::default() }.validate().is_err());
        assert!(AttackSpec { epsilon: 0.0, ..Default::default() }.validate().is_ok());
        let spec = AttackSpec::with_epsilon(4.0 / 255.0);
        assert!((spec.step_size - 0.4 / 255.0).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_gives_zero_delta() {
        let x = Tensor::full(&[4], 0.5);
        let mut o = linear(Tensor::zeros(&[4]));
        let r = pgd(&mut o, &x, 0, &AttackSpec { steps: 1, ..Default::default() }).unwrap();
        assert_eq!(r.delta, Tensor::zeros(&[4]));
    }

    #[test]
    fn linear_scorer_reaches_corner_in_one_step() {
        let x = Tensor::from_vec(&[4], vec![0.2, 0.5, 0.7, 0.4]).unwrap();
        let c = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, -0.1]).unwrap();
        let eps = 4.0 / 255.0;
        let spec = AttackSpec { steps: 1, step_size: eps, epsilon: eps, ..Default::default() };
        let r = pgd(&mut linear(c.clone()), &x, 0, &spec).unwrap();
        for (d, cv) in r.delta.data().iter().zip(c.data()) {
            assert!((d - eps * cv.signum()).abs() < 1e-15);
            assert!(d.abs() <= eps);
        }
    }

    #[test]
    fn non_finite_gradients_are_counted() {
        let x = Tensor::full(&[3], 0.5);
        let mut o = FnOracle(|_x: &Tensor, _y: usize, _s: u64| Ok((0.0, Tensor::from_vec(&[3], vec![f64::NAN, 1.0, f64::INFINITY]).unwrap())));
        let r = pgd(&mut o, &x, 0, &AttackSpec { steps: 3, ..Default::default() }).unwrap();
        assert_eq!(r.sanitized, 6);
        assert_eq!(r.delta.data()[0], 0.0);
        assert!(r.delta.data()[1] > 0.0);
    }

    #[test]
    fn projection_is_exact_at_the_box_edge() {
        let x = Tensor::from_vec(&[3], vec![0.3, 0.999, 0.001]).unwrap();
        let eps = 0.1;
        let cand = Tensor::from_vec(&[3], vec![0.9, 1.5, -0.3]).unwrap();
        let p = project(&x, &cand, eps, Norm::Linf);
        assert!(p.sub(&x).max_abs() <= eps);
        assert_eq!(p.data()[1], 1.0);
        assert_eq!(p.data()[2], 0.0);
        let q = project(&x, &cand, eps, Norm::L2);
        assert!(q.sub(&x).norm_l2() <= eps);
    }

    #[test]
    fn square_side_schedule() {
        assert_eq!(square_side_fraction(0, 100), 0.5);
        assert_eq!(square_side_fraction(20, 100), 0.25);
        assert_eq!(square_side_fraction(50, 100), 0.1);
        assert_eq!(square_side_fraction(99, 100), 0.05);
    }

    #[test]
    fn square_zero_budget_and_already_wrong() {
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let r = square_attack(|_: &Tensor, _| Ok(1.0), &x, &AttackSpec { kind: AttackKind::Square, query_budget: 0, ..Default::default() }).unwrap();
        assert_eq!((r.queries, &r.x_adv), (0, &x));
        let r = square_attack(|_: &Tensor, _| Ok(-1.0), &x, &AttackSpec { kind: AttackKind::Square, ..Default::default() }).unwrap();
        assert!(r.success);
        assert_eq!(r.queries, 1);
    }

    #[test]
    fn margin_definition() {
        let z = Tensor::from_vec(&[3], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(margin(&z, 1), 1.0);
        assert_eq!(margin(&z, 0), -2.0);
    }
}
