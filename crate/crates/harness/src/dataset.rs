//! Seeded synthetic image classification task.
//!
//! Each class owns a smooth low-frequency template per channel. A sample is
//! its class template plus a random class-independent nuisance pattern and
//! pixel noise, clipped to `[0, 1]`.

use std::f64::consts::PI;

use drift_core::{rng, Dataset};
use drift_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub side: usize,
    pub channels: usize,
    pub train: usize,
    pub eval: usize,
    /// Template amplitude around mid-grey.
    pub amplitude: f64,
    /// Amplitude of the class-independent nuisance pattern.
    pub nuisance: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            side: 16,
            channels: 3,
            train: 400,
            eval: 200,
            amplitude: 0.1,
            nuisance: 0.1,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(HarnessError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.side < 8 {
            return Err(HarnessError::Config(format!("image side must be at least 8, got {}", self.side)));
        }
        if self.channels == 0 || self.train == 0 || self.eval == 0 {
            return Err(HarnessError::Config("channels and split sizes must be positive".into()));
        }
        for (name, v) in [("amplitude", self.amplitude), ("nuisance", self.nuisance), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HarnessError::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.side, self.side]
    }
}

/// Sum of a few random planar cosines per channel, scaled to max-abs 1.
fn smooth_pattern(r: &mut impl Rng, channels: usize, side: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, side, side]);
    for ch in 0..channels {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fx = r.random_range(0..=2) as f64;
                let fy = r.random_range(0..=2) as f64;
                (fx, fy, r.random_range(0.0..2.0 * PI), r.random_range(0.5..1.0))
            })
            .collect();
        let plane = &mut t.data_mut()[ch * side * side..(ch + 1) * side * side];
        for yy in 0..side {
            for xx in 0..side {
                plane[yy * side + xx] = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * xx as f64 + fy * yy as f64) / side as f64 + ph).cos())
                    .sum();
            }
        }
    }
    let m = t.max_abs();
    if m > 0.0 {
        t.scale(1.0 / m)
    } else {
        t
    }
}

/// Per-class templates, a pure function of the spec seed.
pub fn class_templates(spec: &DatasetSpec) -> Vec<Tensor> {
    (0..spec.classes)
        .map(|c| smooth_pattern(&mut rng::stream(spec.seed, &[0x7e3, c as u64]), spec.channels, spec.side))
        .collect()
}

fn sample(spec: &DatasetSpec, templates: &[Tensor], id: u64) -> (Tensor, usize) {
    let label = (id % spec.classes as u64) as usize;
    let mut r = rng::stream(spec.seed, &[0x5a, id]);
    let nuisance = smooth_pattern(&mut r, spec.channels, spec.side);
    let t = &templates[label];
    let img = Tensor::from_fn(t.shape(), |i| {
        let n: f64 = r.sample(StandardNormal);
        (0.5 + spec.amplitude * t.data()[i] + spec.nuisance * nuisance.data()[i] + spec.noise * n).clamp(0.0, 1.0)
    });
    (img, label)
}

fn split(spec: &DatasetSpec, templates: &[Tensor], ids: std::ops::Range<u64>) -> Dataset {
    let (mut images, mut labels, mut out_ids) = (Vec::new(), Vec::new(), Vec::new());
    for id in ids {
        let (x, y) = sample(spec, templates, id);
        images.push(x);
        labels.push(y);
        out_ids.push(id);
    }
    Dataset { images, labels, ids: out_ids }
}

/// Train and eval splits. Ids `0..train` go to training and the next `eval`
/// ids to evaluation, so the splits are disjoint by construction.
pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let templates = class_templates(spec);
    let n_train = spec.train as u64;
    let train = split(spec, &templates, 0..n_train);
    let eval = split(spec, &templates, n_train..n_train + spec.eval as u64);
    Ok((train, eval))
}

/// Accuracy (%) on `eval` of the nearest class mean computed from `train`.
pub fn nearest_mean_accuracy(train: &Dataset, eval: &Dataset, classes: usize) -> f64 {
    let shape = match train.image_shape() {
        Some(s) => s.to_vec(),
        None => return 0.0,
    };
    let mut means = vec![Tensor::zeros(&shape); classes];
    let mut counts = vec![0usize; classes];
    for (x, &y) in train.images.iter().zip(&train.labels) {
        means[y].axpy(1.0, x);
        counts[y] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        *m = m.scale(1.0 / c.max(1) as f64);
    }
    let correct = eval
        .images
        .iter()
        .zip(&eval.labels)
        .filter(|(x, &y)| {
            let d: Vec<f64> = means.iter().map(|m| m.sub(x).norm_l2()).collect();
            let best = (0..classes).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
            best == y
        })
        .count();
    100.0 * correct as f64 / eval.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let spec = DatasetSpec { train: 30, eval: 20, ..Default::default() };
        let (a, b) = generate_synthetic_dataset(&spec).unwrap();
        let (c, d) = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert!(a.ids.iter().all(|i| !b.ids.contains(i)));
        assert!(a.images.iter().all(|x| x.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic_dataset(&DatasetSpec { classes: 1, ..Default::default() }).is_err());
        assert!(generate_synthetic_dataset(&DatasetSpec { side: 4, ..Default::default() }).is_err());
    }
}
