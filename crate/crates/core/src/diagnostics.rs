//! Consensus measurement, gradient-obfuscation checks, transferability and
//! probe-count studies.

use drift_tensor::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, pipeline_loss_grad, AttackKind, AttackSpec, FnOracle, GradientOracle, Norm, PipelineOracle};
use crate::data::Dataset;
use crate::error::{domain, Result};
use crate::losses::{cos_sq, loss_js_with, COS_MIN_NORM};
use crate::models::{ensemble_forward, BaseClassifier, FilterBank, PathSelect};
use crate::rng;

/// Linear-interpolated percentile of `xs` for `q` in `[0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// How consensus between pipelines is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ConsensusMode {
    /// Squared cosine of full input gradients of the cross-entropy.
    Exact,
    /// Squared cosine of logit VJPs averaged over `probes` unit Gaussian
    /// logit-space probes drawn per sample from `seed`.
    Probed { probes: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    /// K x K matrix of mean consensus; the diagonal is 1 by convention.
    pub gamma: Vec<Vec<f64>>,
    /// Standard error of each entry's mean over samples.
    pub std_err: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub mode: ConsensusMode,
    /// Pair evaluations where a gradient had (numerically) zero norm.
    pub zero_gradient_pairs: usize,
}

impl ConsensusReport {
    pub fn mean_off_diagonal(&self) -> f64 {
        off_diagonal_mean(&self.gamma)
    }
}

pub fn off_diagonal_mean(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    if k < 2 {
        return f64::NAN;
    }
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (k * (k - 1)) as f64
}

pub fn diagonal_mean(m: &[Vec<f64>]) -> f64 {
    mean(&m.iter().enumerate().map(|(i, r)| r[i]).collect::<Vec<_>>())
}

/// K x K consensus for one labelled input plus the count of degenerate pairs.
pub fn sample_consensus(bank: &FilterBank, model: &BaseClassifier, x: &Tensor, y: usize, mode: ConsensusMode, stream: u64) -> Result<(Vec<Vec<f64>>, usize)> {
    let k = bank.len();
    let mut g = vec![vec![1.0; k]; k];
    let mut zero = 0;
    match mode {
        ConsensusMode::Exact => {
            let grads = bank
                .filters()
                .iter()
                .map(|f| Ok(pipeline_loss_grad(model, Some(f), x, y, false)?.1))
                .collect::<Result<Vec<_>>>()?;
            for i in 0..k {
                for j in i + 1..k {
                    if grads[i].norm_l2() < COS_MIN_NORM || grads[j].norm_l2() < COS_MIN_NORM {
                        zero += 1;
                    }
                    let c = cos_sq(&grads[i], &grads[j]);
                    g[i][j] = c;
                    g[j][i] = c;
                }
            }
        }
        ConsensusMode::Probed { probes, seed } => {
            if probes == 0 {
                return Err(domain("probed consensus needs at least one probe"));
            }
            let mut r = rng::stream(seed, &[0xc0, stream]);
            let ws: Vec<Tensor> = (0..probes).map(|_| rng::unit_gaussian(&mut r, &[model.num_classes()])).collect();
            // vjps[i][p] = J_i(x)^T w_p
            let mut vjps = Vec::with_capacity(k);
            for f in bank.filters() {
                let mut tape = Tape::new();
                let fb = f.bind(&mut tape);
                let mb = model.bind(&mut tape);
                let xn = tape.leaf(x.clone());
                let u = fb.forward(&mut tape, xn)?;
                let z = mb.forward(&mut tape, u)?;
                let row = ws.iter().map(|w| Ok(tape.vjp(z, w, &[xn])?.remove(0))).collect::<Result<Vec<_>>>()?;
                vjps.push(row);
            }
            for i in 0..k {
                for j in i + 1..k {
                    let mut s = 0.0;
                    for p in 0..probes {
                        if vjps[i][p].norm_l2() < COS_MIN_NORM || vjps[j][p].norm_l2() < COS_MIN_NORM {
                            zero += 1;
                        }
                        s += cos_sq(&vjps[i][p], &vjps[j][p]);
                    }
                    g[i][j] = s / probes as f64;
                    g[j][i] = g[i][j];
                }
            }
        }
    }
    Ok((g, zero))
}

/// Dataset-mean consensus matrix.
pub fn consensus(bank: &FilterBank, model: &BaseClassifier, data: &Dataset, mode: ConsensusMode) -> Result<ConsensusReport> {
    if data.is_empty() {
        return Err(domain("consensus needs a nonempty dataset"));
    }
    let k = bank.len();
    let mut per = vec![vec![Vec::with_capacity(data.len()); k]; k];
    let mut zero = 0;
    for (n, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let (g, z) = sample_consensus(bank, model, x, y, mode, data.ids[n])?;
        zero += z;
        for i in 0..k {
            for j in 0..k {
                per[i][j].push(g[i][j]);
            }
        }
    }
    let n = data.len() as f64;
    let gamma = per.iter().map(|r| r.iter().map(|v| mean(v)).collect()).collect();
    let std_err = per.iter().map(|r| r.iter().map(|v| (variance(v) / n).sqrt()).collect()).collect();
    Ok(ConsensusReport { gamma, std_err, n_samples: data.len(), mode, zero_gradient_pairs: zero })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub p05: f64,
    pub p95: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        Self { median: percentile(xs, 0.5), mean: mean(xs), p05: percentile(xs, 0.05), p95: percentile(xs, 0.95) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaMismatch {
    pub eta: f64,
    pub stats: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchStats {
    pub per_eta: Vec<EtaMismatch>,
    pub grad_norm: Summary,
    pub n_samples: usize,
    pub n_dirs: usize,
}

/// Absolute gap between the analytic directional derivative and the centred
/// finite-difference slope, over seeded orthonormal directions.
///
/// Sample `n` uses oracle step `n` for the gradient and both probes, so an
/// oracle with common randomness sees the same draws on each side.
pub fn directional_mismatch(oracle: &mut dyn GradientOracle, data: &Dataset, etas: &[f64], n_dirs: usize, dir_seed: u64) -> Result<MismatchStats> {
    if data.is_empty() || etas.is_empty() || n_dirs == 0 {
        return Err(domain("mismatch needs samples, step sizes and directions"));
    }
    let mut gaps = vec![Vec::new(); etas.len()];
    let mut norms = Vec::with_capacity(data.len());
    for (n, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let step = n as u64;
        let (_, g) = oracle.loss_and_grad(x, y, step)?;
        norms.push(g.norm_l2());
        let mut r = rng::stream(dir_seed, &[0xd1, data.ids[n]]);
        for v in rng::orthonormal_directions(&mut r, x.shape(), n_dirs) {
            let analytic = g.dot(&v);
            for (e, &eta) in etas.iter().enumerate() {
                let mut xp = x.clone();
                xp.axpy(eta, &v);
                let mut xm = x.clone();
                xm.axpy(-eta, &v);
                let fd = (oracle.loss(&xp, y, step)? - oracle.loss(&xm, y, step)?) / (2.0 * eta);
                gaps[e].push((analytic - fd).abs());
            }
        }
    }
    Ok(MismatchStats {
        per_eta: etas.iter().zip(&gaps).map(|(&eta, g)| EtaMismatch { eta, stats: Summary::of(g) }).collect(),
        grad_norm: Summary::of(&norms),
        n_samples: data.len(),
        n_dirs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub grid_n: usize,
    pub tau: f64,
    pub dir_seed: u64,
    pub oracle_step: u64,
    /// Row-major: `values[a * grid_n + b]` is the loss at `x + s_a u + s_b v`.
    pub values: Vec<f64>,
}

impl LandscapeGrid {
    pub fn offsets(&self) -> Vec<f64> {
        linspace(-self.tau, self.tau, self.grid_n)
    }

    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.grid_n + b]
    }

    pub fn center(&self) -> f64 {
        self.at(self.grid_n / 2, self.grid_n / 2)
    }

    /// Largest absolute second difference along rows and columns.
    pub fn max_second_difference(&self) -> f64 {
        let n = self.grid_n;
        let mut m: f64 = 0.0;
        for a in 0..n {
            for b in 1..n.saturating_sub(1) {
                m = m.max((self.at(a, b - 1) - 2.0 * self.at(a, b) + self.at(a, b + 1)).abs());
                m = m.max((self.at(b - 1, a) - 2.0 * self.at(b, a) + self.at(b + 1, a)).abs());
            }
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# tau={},grid_n={},dir_seed={},oracle_step={}\n", self.tau, self.grid_n, self.dir_seed, self.oracle_step);
        let offs = self.offsets();
        s.push_str("a,b,loss\n");
        for (ia, a) in offs.iter().enumerate() {
            for (ib, b) in offs.iter().enumerate() {
                s.push_str(&format!("{a},{b},{}\n", self.at(ia, ib)));
            }
        }
        s
    }
}

/// `n` evenly spaced points from `lo` to `hi`; the midpoint is exactly
/// `(lo + hi) / 2` for odd `n`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    let mid = (n - 1) as f64 / 2.0;
    let half = (hi - lo) / 2.0;
    let c = (lo + hi) / 2.0;
    (0..n).map(|i| c + half * (i as f64 - mid) / mid).collect()
}

/// Loss over the plane spanned by two seeded orthonormal directions; every
/// cell uses oracle step `oracle_step` so the randomness is shared.
pub fn loss_landscape(oracle: &mut dyn GradientOracle, x: &Tensor, y: usize, tau: f64, grid_n: usize, dir_seed: u64, oracle_step: u64) -> Result<LandscapeGrid> {
    if grid_n % 2 == 0 {
        return Err(domain(format!("grid size must be odd, got {grid_n}")));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(domain("tau must be finite and nonnegative"));
    }
    let mut r = rng::stream(dir_seed, &[0x1a]);
    let dirs = rng::orthonormal_directions(&mut r, x.shape(), 2);
    let offs = linspace(-tau, tau, grid_n);
    let mut values = Vec::with_capacity(grid_n * grid_n);
    for &a in &offs {
        for &b in &offs {
            let mut p = x.clone();
            p.axpy(a, &dirs[0]);
            p.axpy(b, &dirs[1]);
            values.push(oracle.loss(&p, y, oracle_step)?);
        }
    }
    Ok(LandscapeGrid { grid_n, tau, dir_seed, oracle_step, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    /// `accuracy[i][j]`: robust accuracy (%) of pipeline j on examples
    /// crafted against pipeline i.
    pub accuracy: Vec<Vec<f64>>,
    pub n_samples: usize,
}

impl TransferMatrix {
    pub fn off_diagonal_mean(&self) -> f64 {
        off_diagonal_mean(&self.accuracy)
    }

    pub fn diagonal_mean(&self) -> f64 {
        diagonal_mean(&self.accuracy)
    }
}

/// Cross-pipeline robust accuracy under white-box PGD on each source filter.
pub fn transfer_matrix(bank: &FilterBank, model: &BaseClassifier, data: &Dataset, spec: &AttackSpec) -> Result<TransferMatrix> {
    if spec.kind != AttackKind::Pgd {
        return Err(domain("transfer matrix uses PGD"));
    }
    if data.is_empty() {
        return Err(domain("transfer matrix needs a nonempty dataset"));
    }
    let k = bank.len();
    let mut correct = vec![vec![0usize; k]; k];
    for (n, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let s = spec.for_sample(data.ids[n]);
        for (i, row) in correct.iter_mut().enumerate() {
            let mut o = PipelineOracle::filtered(bank, model, i)?;
            let adv = pgd(&mut o, x, y, &s)?;
            for (j, c) in row.iter_mut().enumerate() {
                if ensemble_forward(bank, model, &adv.x_adv, PathSelect::Index(j))?.argmax() == y {
                    *c += 1;
                }
            }
        }
    }
    let n = data.len() as f64;
    Ok(TransferMatrix {
        accuracy: correct.iter().map(|r| r.iter().map(|&c| 100.0 * c as f64 / n).collect()).collect(),
        n_samples: data.len(),
    })
}

/// Two-sided Hoeffding bound for a mean of `p` variables in `[0, 1]`.
pub fn hoeffding_bound(p: usize, eps: f64) -> f64 {
    2.0 * (-2.0 * p as f64 * eps * eps).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub p: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_err: f64,
    /// Fraction of trials whose estimate deviates from the reference by at least `eps`.
    pub exceedance: f64,
    pub hoeffding: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeVarianceStudy {
    pub rows: Vec<ProbeRow>,
    pub trials: usize,
    pub eps: f64,
    /// Pooled mean over every trial; the deviation reference.
    pub reference: f64,
    /// Least-squares slope of log variance against log P.
    pub slope: f64,
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Spread of the probed Jacobian-separation estimate across independent
/// probe seeds for each probe count.
pub fn probe_variance_study(bank: &FilterBank, x_batch: &[Tensor], p_list: &[usize], trials: usize, eps: f64, seed: u64) -> Result<ProbeVarianceStudy> {
    if trials < 30 {
        return Err(domain(format!("probe study needs at least 30 trials, got {trials}")));
    }
    if bank.len() < 2 {
        return Err(domain("probe study needs at least two filters"));
    }
    if p_list.is_empty() || p_list.contains(&0) {
        return Err(domain("probe counts must be positive"));
    }
    let mut estimates = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let mut est = Vec::with_capacity(trials);
        for t in 0..trials {
            let mut r = rng::stream(seed, &[0x9b, p as u64, t as u64]);
            let probes: Vec<Tensor> = (0..p).map(|_| rng::unit_gaussian(&mut r, bank.image_shape())).collect();
            est.push(loss_js_with(bank, x_batch, &probes)?.expect("at least two filters"));
        }
        estimates.push(est);
    }
    let reference = mean(&estimates.concat());
    let rows: Vec<ProbeRow> = p_list
        .iter()
        .zip(&estimates)
        .map(|(&p, est)| {
            let var = variance(est);
            ProbeRow {
                p,
                mean: mean(est),
                variance: var,
                std_err: (var / est.len() as f64).sqrt(),
                exceedance: est.iter().filter(|e| (*e - reference).abs() >= eps).count() as f64 / est.len() as f64,
                hoeffding: hoeffding_bound(p, eps),
            }
        })
        .collect();
    let lx: Vec<f64> = rows.iter().map(|r| (r.p as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
    Ok(ProbeVarianceStudy { slope: ols_slope(&lx, &ly), rows, trials, eps, reference })
}

/// Distribution of input-gradient norms under an oracle (sample `n` at step `n`).
pub fn gradient_norm_stats(oracle: &mut dyn GradientOracle, data: &Dataset) -> Result<Summary> {
    if data.is_empty() {
        return Err(domain("gradient statistics need a nonempty dataset"));
    }
    let mut norms = Vec::with_capacity(data.len());
    for (n, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        norms.push(oracle.loss_and_grad(x, y, n as u64)?.1.norm_l2());
    }
    Ok(Summary::of(&norms))
}

/// Loss increase on a linear pipeline with gradient `g_j` after an l2 step of
/// length `eps` along `g_i`, next to its first-order prediction
/// `eps * |g_j| * cos(g_i, g_j)`.
pub fn linear_transfer_gain(g_i: &Tensor, g_j: &Tensor, x: &Tensor, eps: f64) -> Result<(f64, f64)> {
    let gi = g_i.clone();
    let mut source = FnOracle(move |p: &Tensor, _y: usize, _s: u64| Ok((p.dot(&gi), gi.clone())));
    let spec = AttackSpec { kind: AttackKind::Pgd, norm: Norm::L2, epsilon: eps, steps: 1, step_size: eps, ..AttackSpec::default() };
    let adv = pgd(&mut source, x, 0, &spec)?;
    let measured = g_j.dot(&adv.x_adv) - g_j.dot(x);
    let cos = g_i.dot(g_j) / (g_i.norm_l2() * g_j.norm_l2());
    Ok((measured, eps * g_j.norm_l2() * cos))
}

/// Gradient of unit norm with squared cosine `rho` to the unit vector `a`.
pub fn with_consensus(a: &Tensor, b_perp: &Tensor, rho: f64) -> Tensor {
    let c = rho.sqrt();
    let s = (1.0 - rho).sqrt();
    let mut out = a.scale(c);
    out.axpy(s, b_perp);
    out
}

/// Cross-pipeline success rate over random linear pipeline pairs with fixed
/// consensus `rho`: the attacker takes an l2 step of length `eps` on
/// pipeline i and succeeds when pipeline j's loss rises above its margin.
/// Draws are shared across `rho` values for the same `seed`.
pub fn linear_cross_success(rho: f64, trials: usize, dim: usize, eps: f64, seed: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(domain("consensus must lie in [0, 1]"));
    }
    let mut wins = 0;
    for t in 0..trials {
        let mut r = rng::stream(seed, &[0x7e, t as u64]);
        let dirs = rng::orthonormal_directions(&mut r, &[dim], 2);
        let norm_j: f64 = r.random_range(0.5..2.0);
        let margin: f64 = r.random_range(0.0..eps * 2.0);
        let x = Tensor::full(&[dim], 0.5);
        let g_j = with_consensus(&dirs[0], &dirs[1], rho).scale(norm_j);
        let (gain, _) = linear_transfer_gain(&dirs[0], &g_j, &x, eps)?;
        if gain > margin {
            wins += 1;
        }
    }
    Ok(wins as f64 / trials.max(1) as f64)
}
