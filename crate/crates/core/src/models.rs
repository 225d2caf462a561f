//! The frozen base classifier and the bank of dimension-preserving filters.

use drift_tensor::{checksum_all, NodeRef, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{domain, DriftError, Result};
use crate::rng;
use crate::training::AdamW;

pub const KERNEL: usize = 3;
const PAD: usize = KERNEL / 2;

/// Hidden channel widths of the base classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseWidths {
    pub conv1: usize,
    pub conv2: usize,
}

impl Default for BaseWidths {
    fn default() -> Self {
        Self { conv1: 16, conv2: 16 }
    }
}

/// conv -> relu -> conv -> relu -> flatten -> dense.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseClassifier {
    image_shape: [usize; 3],
    num_classes: usize,
    widths: BaseWidths,
    params: Vec<Tensor>,
    frozen: bool,
}

/// Base-model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundBase {
    params: Vec<NodeRef>,
    flat: usize,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn check_image_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok([*c, *h, *w]),
        _ => Err(domain(format!("degenerate image shape {shape:?}"))),
    }
}

impl BaseClassifier {
    pub const PARAM_NAMES: [&'static str; 6] =
        ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias"];

    /// Randomly initialized, unfrozen classifier (Kaiming-uniform weights,
    /// zero biases), deterministic in `seed`.
    pub fn new(image_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        Self::with_widths(image_shape, num_classes, BaseWidths::default(), seed)
    }

    pub fn with_widths(image_shape: &[usize], num_classes: usize, widths: BaseWidths, seed: u64) -> Result<Self> {
        let [c, h, w] = check_image_shape(image_shape)?;
        if num_classes < 2 {
            return Err(domain(format!("need at least 2 classes, got {num_classes}")));
        }
        if widths.conv1 == 0 || widths.conv2 == 0 {
            return Err(domain("base widths must be positive"));
        }
        let mut r = rng::stream(seed, &[0xba5e]);
        let k2 = KERNEL * KERNEL;
        let flat = widths.conv2 * h * w;
        let params = vec![
            uniform(&mut r, &[widths.conv1, c, KERNEL, KERNEL], (6.0 / (c * k2) as f64).sqrt()),
            Tensor::zeros(&[widths.conv1]),
            uniform(&mut r, &[widths.conv2, widths.conv1, KERNEL, KERNEL], (6.0 / (widths.conv1 * k2) as f64).sqrt()),
            Tensor::zeros(&[widths.conv2]),
            uniform(&mut r, &[num_classes, flat], (3.0 / flat as f64).sqrt()),
            Tensor::zeros(&[num_classes]),
        ];
        Ok(Self {
            image_shape: [c, h, w],
            num_classes,
            widths,
            params,
            frozen: false,
        })
    }

    /// Rebuilds a classifier from stored parameters.
    pub fn from_params(image_shape: &[usize], num_classes: usize, widths: BaseWidths, params: Vec<Tensor>, frozen: bool) -> Result<Self> {
        let template = Self::with_widths(image_shape, num_classes, widths, 0)?;
        if params.len() != template.params.len() {
            return Err(domain("wrong number of base parameters"));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.shape() != t.shape() {
                return Err(DriftError::Tensor(drift_tensor::TensorError::Dimension {
                    op: "BaseClassifier::from_params",
                    expected: t.shape().to_vec(),
                    got: p.shape().to_vec(),
                }));
            }
        }
        Ok(Self { params, frozen, ..template })
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn widths(&self) -> BaseWidths {
        self.widths
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(&self.params)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBase {
        BoundBase {
            params: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
            flat: self.widths.conv2 * self.image_shape[1] * self.image_shape[2],
        }
    }

    /// Logits for a single image, without keeping the tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let z = bound.forward(&mut tape, xn)?;
        Ok(tape.value(z)?.clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for (x, &y) in data.images.iter().zip(&data.labels) {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / data.len().max(1) as f64)
    }
}

impl BoundBase {
    pub fn params(&self) -> &[NodeRef] {
        &self.params
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeRef) -> Result<NodeRef> {
        let p = &self.params;
        let h = tape.conv2d(x, p[0], p[1], PAD)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, p[2], p[3], PAD)?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[self.flat])?;
        Ok(tape.dense(h, p[4], p[5])?)
    }
}

/// Trains the classifier with plain cross-entropy and freezes it.
pub fn pretrain_and_freeze(mut model: BaseClassifier, data: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<BaseClassifier> {
    if data.is_empty() {
        return Err(domain("pretraining needs a nonempty dataset"));
    }
    if model.frozen {
        return Err(crate::error::contract("model is already frozen"));
    }
    const BATCH: usize = 32;
    let mut opt = AdamW::new(lr, 0.0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut r = rng::stream(seed, &[0x9e7a, epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        for chunk in order.chunks(BATCH) {
            let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut total = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let xn = tape.leaf(data.images[i].clone());
                let z = bound.forward(&mut tape, xn)?;
                let l = tape.softmax_cross_entropy(z, data.labels[i])?;
                total += tape.value(l)?.item();
                for (acc, g) in grads.iter_mut().zip(tape.grad(l, bound.params())?) {
                    acc.axpy(1.0 / chunk.len() as f64, &g);
                }
            }
            if !total.is_finite() {
                return Err(DriftError::Divergence(format!("non-finite pretraining loss in epoch {epoch}")));
            }
            crate::training::sanitize_gradients(&mut grads);
            opt.step(&mut model.params, &grads)?;
        }
    }
    model.frozen = true;
    Ok(model)
}

/// Filter architecture variants; every variant preserves the input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterArch {
    /// `relu(conv(x))` with a channel-preserving 3x3 kernel.
    SingleConv,
    /// `x + conv2(relu(conv1(x)))` through a hidden width.
    ResBlock,
    /// Four channel-preserving 3x3 conv + relu layers.
    DeepConv,
}

impl FilterArch {
    pub fn code(self) -> u8 {
        match self {
            FilterArch::SingleConv => 0,
            FilterArch::ResBlock => 1,
            FilterArch::DeepConv => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FilterArch::SingleConv),
            1 => Some(FilterArch::ResBlock),
            2 => Some(FilterArch::DeepConv),
            _ => None,
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 16;
const INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    arch: FilterArch,
    hidden: usize,
    channels: usize,
    params: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BoundFilter {
    arch: FilterArch,
    params: Vec<NodeRef>,
}

fn delta_kernel(c: usize) -> Tensor {
    let mut k = Tensor::zeros(&[c, c, KERNEL, KERNEL]);
    let center = KERNEL * KERNEL / 2;
    for i in 0..c {
        k.data_mut()[(i * c + i) * KERNEL * KERNEL + center] = 1.0;
    }
    k
}

impl Filter {
    /// Fresh filter for `channels`-channel images.
    ///
    /// `ResBlock` gets a small random first conv and an all-zero second
    /// conv, so it is exactly the identity. The other variants start from
    /// centred delta kernels plus small zero-mean uniform noise.
    pub fn init_identity(arch: FilterArch, channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        if channels == 0 || hidden == 0 {
            return Err(domain("filter channels and hidden width must be positive"));
        }
        let mut r = rng::stream(seed, &[0xf117, arch.code() as u64]);
        let k2 = KERNEL * KERNEL;
        let params = match arch {
            FilterArch::ResBlock => {
                let bound = INIT_GAIN * (6.0 / (channels * k2) as f64).sqrt();
                vec![
                    uniform(&mut r, &[hidden, channels, KERNEL, KERNEL], bound),
                    Tensor::zeros(&[hidden]),
                    Tensor::zeros(&[channels, hidden, KERNEL, KERNEL]),
                    Tensor::zeros(&[channels]),
                ]
            }
            FilterArch::SingleConv | FilterArch::DeepConv => {
                let layers = if arch == FilterArch::SingleConv { 1 } else { 4 };
                let bound = INIT_GAIN * (6.0 / (channels * k2) as f64).sqrt();
                let mut ps = Vec::with_capacity(2 * layers);
                for _ in 0..layers {
                    let noise = uniform(&mut r, &[channels, channels, KERNEL, KERNEL], bound);
                    ps.push(delta_kernel(channels).add(&noise));
                    ps.push(Tensor::zeros(&[channels]));
                }
                ps
            }
        };
        Ok(Self { arch, hidden, channels, params })
    }

    pub fn from_params(arch: FilterArch, channels: usize, hidden: usize, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::init_identity(arch, channels, hidden, 0)?;
        if params.len() != template.params.len()
            || params.iter().zip(&template.params).any(|(p, t)| p.shape() != t.shape())
        {
            return Err(domain(format!("parameter shapes do not match a {arch:?} filter")));
        }
        Ok(Self { params, ..template })
    }

    pub fn arch(&self) -> FilterArch {
        self.arch
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.arch {
            FilterArch::ResBlock => ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            _ => (0..self.params.len() / 2)
                .flat_map(|l| [format!("conv{}.weight", l + 1), format!("conv{}.bias", l + 1)])
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFilter {
        BoundFilter {
            arch: self.arch,
            params: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Filtered image for a single input.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let y = b.forward(&mut tape, xn)?;
        Ok(tape.value(y)?.clone())
    }
}

impl BoundFilter {
    pub fn params(&self) -> &[NodeRef] {
        &self.params
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeRef) -> Result<NodeRef> {
        let p = &self.params;
        match self.arch {
            FilterArch::ResBlock => {
                let h = tape.conv2d(x, p[0], p[1], PAD)?;
                let h = tape.relu(h)?;
                let r = tape.conv2d(h, p[2], p[3], PAD)?;
                Ok(tape.add(x, r)?)
            }
            FilterArch::SingleConv | FilterArch::DeepConv => {
                let mut h = x;
                for layer in p.chunks(2) {
                    h = tape.conv2d(h, layer[0], layer[1], PAD)?;
                    h = tape.relu(h)?;
                }
                Ok(h)
            }
        }
    }
}

/// Which path `ensemble_forward` routes an input through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathSelect {
    /// One filter drawn uniformly from the trained filters; the draw is a
    /// pure function of `(seed, stream)`.
    Sample { seed: u64, stream: u64 },
    Index(usize),
    Identity,
}

/// K learnable filters plus the implicit identity path.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    filters: Vec<Filter>,
    image_shape: [usize; 3],
    seed: u64,
}

impl FilterBank {
    pub fn new(arch: FilterArch, k: usize, image_shape: &[usize], seed: u64) -> Result<Self> {
        Self::with_hidden(arch, k, DEFAULT_HIDDEN, image_shape, seed)
    }

    pub fn with_hidden(arch: FilterArch, k: usize, hidden: usize, image_shape: &[usize], seed: u64) -> Result<Self> {
        let shape = check_image_shape(image_shape)?;
        if k == 0 {
            return Err(domain("a filter bank needs at least one filter"));
        }
        let filters = (0..k)
            .map(|i| Filter::init_identity(arch, shape[0], hidden, rng::derive_seed(seed, &[i as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { filters, image_shape: shape, seed })
    }

    pub fn from_filters(filters: Vec<Filter>, image_shape: &[usize], seed: u64) -> Result<Self> {
        let shape = check_image_shape(image_shape)?;
        if filters.is_empty() {
            return Err(domain("a filter bank needs at least one filter"));
        }
        if filters.iter().any(|f| f.channels != shape[0]) {
            return Err(domain("filter channel count does not match image shape"));
        }
        Ok(Self { filters, image_shape: shape, seed })
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn filters(&self) -> &[Filter] {
        &self.filters
    }

    pub fn filters_mut(&mut self) -> &mut [Filter] {
        &mut self.filters
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(self.filters.iter().flat_map(|f| f.params.iter()))
    }

    pub fn param_count(&self) -> usize {
        self.filters.iter().map(Filter::num_params).sum()
    }

    /// Index drawn by `PathSelect::Sample { seed, stream }`.
    pub fn sample_index(&self, seed: u64, stream: u64) -> usize {
        rng::stream(seed, &[0x5a3e, stream]).random_range(0..self.filters.len())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.image_shape {
            return Err(DriftError::Tensor(drift_tensor::TensorError::Dimension {
                op: "filter_forward",
                expected: self.image_shape.to_vec(),
                got: x.shape().to_vec(),
            }));
        }
        Ok(())
    }

    /// Resolves a path selection to a filter index (`None` = identity path).
    pub fn resolve(&self, mode: PathSelect) -> Result<Option<usize>> {
        match mode {
            PathSelect::Identity => Ok(None),
            PathSelect::Index(i) if i < self.filters.len() => Ok(Some(i)),
            PathSelect::Index(i) => Err(domain(format!("filter index {i} out of range for {} filters", self.filters.len()))),
            PathSelect::Sample { seed, stream } => Ok(Some(self.sample_index(seed, stream))),
        }
    }

    pub fn filter_forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let f = self.filters.get(index).ok_or_else(|| domain(format!("filter index {index} out of range")))?;
        f.apply(x)
    }
}

/// Applies the selected path and then the base model.
pub fn ensemble_forward(bank: &FilterBank, model: &BaseClassifier, x: &Tensor, mode: PathSelect) -> Result<Tensor> {
    bank.check_input(x)?;
    match bank.resolve(mode)? {
        None => model.logits(x),
        Some(i) => {
            let mut tape = Tape::new();
            let f = bank.filters[i].bind(&mut tape);
            let m = model.bind(&mut tape);
            let xn = tape.leaf(x.clone());
            let u = f.forward(&mut tape, xn)?;
            let z = m.forward(&mut tape, u)?;
            Ok(tape.value(z)?.clone())
        }
    }
}

/// Clean accuracy (%) of the stochastic ensemble, one fresh draw per sample.
pub fn ensemble_accuracy(bank: &FilterBank, model: &BaseClassifier, data: &Dataset, seed: u64) -> Result<f64> {
    let mut correct = 0usize;
    for (n, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let z = ensemble_forward(bank, model, x, PathSelect::Sample { seed, stream: data.ids[n] })?;
        if z.argmax() == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(shape, |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn base_model_is_deterministic_per_seed() {
        let a = BaseClassifier::new(&[3, 8, 8], 4, 1).unwrap();
        let b = BaseClassifier::new(&[3, 8, 8], 4, 1).unwrap();
        let c = BaseClassifier::new(&[3, 8, 8], 4, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
        assert!(!a.is_frozen());
        assert_eq!(a.logits(&image(0, &[3, 8, 8])).unwrap().len(), 4);
    }

    #[test]
    fn base_model_rejects_degenerate_inputs() {
        assert!(matches!(BaseClassifier::new(&[3, 0, 8], 4, 1), Err(DriftError::Domain(_))));
        assert!(matches!(BaseClassifier::new(&[3, 8], 4, 1), Err(DriftError::Domain(_))));
        assert!(matches!(BaseClassifier::new(&[3, 8, 8], 1, 1), Err(DriftError::Domain(_))));
    }

    #[test]
    fn res_block_starts_as_exact_identity() {
        let x = image(5, &[3, 6, 6]);
        let f1 = Filter::init_identity(FilterArch::ResBlock, 3, 16, 1).unwrap();
        let f2 = Filter::init_identity(FilterArch::ResBlock, 3, 16, 2).unwrap();
        assert_eq!(f1.apply(&x).unwrap(), x);
        assert_eq!(f2.apply(&x).unwrap(), x);
        assert_ne!(f1.params()[0], f2.params()[0]);
    }

    #[test]
    fn every_arch_preserves_shape() {
        let x = image(6, &[3, 5, 7]);
        for arch in [FilterArch::SingleConv, FilterArch::ResBlock, FilterArch::DeepConv] {
            let f = Filter::init_identity(arch, 3, 16, 9).unwrap();
            assert_eq!(f.apply(&x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn res_block_parameter_count() {
        let f = Filter::init_identity(FilterArch::ResBlock, 3, 16, 0).unwrap();
        assert_eq!(f.num_params(), (3 * 16 * 9 + 16) + (16 * 3 * 9 + 3));
        assert_eq!(f.num_params(), 883);
    }

    #[test]
    fn identity_and_index_paths() {
        let model = BaseClassifier::new(&[3, 6, 6], 3, 4).unwrap();
        let bank = FilterBank::new(FilterArch::ResBlock, 2, &[3, 6, 6], 7).unwrap();
        let x = image(1, &[3, 6, 6]);
        let direct = model.logits(&x).unwrap();
        assert_eq!(ensemble_forward(&bank, &model, &x, PathSelect::Identity).unwrap(), direct);
        assert_eq!(ensemble_forward(&bank, &model, &x, PathSelect::Index(1)).unwrap(), direct);
        assert!(matches!(
            ensemble_forward(&bank, &model, &x, PathSelect::Index(2)),
            Err(DriftError::Domain(_))
        ));
        assert!(ensemble_forward(&bank, &model, &image(1, &[3, 5, 6]), PathSelect::Identity).is_err());
    }

    #[test]
    fn sampling_single_filter_and_reproducibility() {
        let one = FilterBank::new(FilterArch::ResBlock, 1, &[3, 4, 4], 0).unwrap();
        assert!((0..100).all(|s| one.sample_index(9, s) == 0));
        let four = FilterBank::new(FilterArch::ResBlock, 4, &[3, 4, 4], 0).unwrap();
        let a: Vec<usize> = (0..50).map(|s| four.sample_index(3, s)).collect();
        let b: Vec<usize> = (0..50).map(|s| four.sample_index(3, s)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_close_to_uniform() {
        let bank = FilterBank::new(FilterArch::ResBlock, 4, &[3, 4, 4], 0).unwrap();
        let mut counts = [0usize; 4];
        for s in 0..10_000 {
            counts[bank.sample_index(11, s)] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.22..=0.28).contains(&f), "frequency {f}");
        }
    }
}
