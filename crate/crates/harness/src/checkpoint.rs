//! Frozen base model plus filter bank, stored as one DTNS file.
//!
//! Parameters are named `base/<i>` and `filter/<k>/<i>`. Architecture and
//! shape metadata live in two numeric records, `meta/base` and `meta/bank`.

use std::path::Path;

use drift_core::models::{BaseClassifier, BaseWidths, Filter, FilterArch, FilterBank};
use drift_tensor::Tensor;

use crate::dtns::{self, Record};
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BaseClassifier,
    pub bank: FilterBank,
}

fn meta_u64(v: f64, what: &str) -> Result<u64> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as u64)
    } else {
        Err(HarnessError::Format(format!("bad {what} in checkpoint metadata: {v}")))
    }
}

impl Checkpoint {
    pub fn new(model: BaseClassifier, bank: FilterBank) -> Self {
        Self { model, bank }
    }

    pub fn to_records(&self) -> Result<Vec<Record>> {
        let shape = self.bank.image_shape();
        if shape != self.model.image_shape() {
            return Err(HarnessError::Config("bank and model disagree on image shape".into()));
        }
        let first = &self.bank.filters()[0];
        // Seeds are stored split into 32-bit halves so they stay exact in f64.
        let seed = self.bank.seed();
        let bank_meta = vec![
            first.arch().code() as f64,
            self.bank.len() as f64,
            first.hidden() as f64,
            shape[0] as f64,
            shape[1] as f64,
            shape[2] as f64,
            (seed >> 32) as f64,
            (seed & 0xffff_ffff) as f64,
        ];
        let w = self.model.widths();
        let base_meta = vec![
            self.model.num_classes() as f64,
            w.conv1 as f64,
            w.conv2 as f64,
            self.model.is_frozen() as u8 as f64,
        ];
        let mut records = vec![
            Record::new("meta/base", Tensor::from_vec(&[base_meta.len()], base_meta)?),
            Record::new("meta/bank", Tensor::from_vec(&[bank_meta.len()], bank_meta)?),
        ];
        for (i, p) in self.model.params().iter().enumerate() {
            records.push(Record::new(format!("base/{i}"), p.clone()));
        }
        for (k, f) in self.bank.filters().iter().enumerate() {
            if f.arch() != first.arch() || f.hidden() != first.hidden() {
                return Err(HarnessError::Config("checkpoints require a homogeneous bank".into()));
            }
            for (i, p) in f.params().iter().enumerate() {
                records.push(Record::new(format!("filter/{k}/{i}"), p.clone()));
            }
        }
        Ok(records)
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .map(|r| r.tensor.clone())
                .ok_or_else(|| HarnessError::Format(format!("missing record `{name}`")))
        };
        let base_meta = find("meta/base")?;
        let bank_meta = find("meta/bank")?;
        if base_meta.len() != 4 || bank_meta.len() != 8 {
            return Err(HarnessError::Format("metadata records have the wrong length".into()));
        }
        let b = bank_meta.data();
        let arch = FilterArch::from_code(meta_u64(b[0], "arch")? as u8).ok_or_else(|| HarnessError::Format("unknown filter arch".into()))?;
        let k = meta_u64(b[1], "bank size")? as usize;
        let hidden = meta_u64(b[2], "hidden width")? as usize;
        let shape = [meta_u64(b[3], "channels")? as usize, meta_u64(b[4], "height")? as usize, meta_u64(b[5], "width")? as usize];
        let seed = (meta_u64(b[6], "seed")? << 32) | meta_u64(b[7], "seed")?;

        let m = base_meta.data();
        let classes = meta_u64(m[0], "class count")? as usize;
        let widths = BaseWidths { conv1: meta_u64(m[1], "conv1 width")? as usize, conv2: meta_u64(m[2], "conv2 width")? as usize };
        let frozen = m[3] != 0.0;

        let n_base = records.iter().filter(|r| r.name.starts_with("base/")).count();
        let base_params = (0..n_base).map(|i| find(&format!("base/{i}"))).collect::<Result<Vec<_>>>()?;
        let model = BaseClassifier::from_params(&shape, classes, widths, base_params, frozen)?;

        let mut filters = Vec::with_capacity(k);
        for f in 0..k {
            let prefix = format!("filter/{f}/");
            let n = records.iter().filter(|r| r.name.starts_with(&prefix)).count();
            let params = (0..n).map(|i| find(&format!("{prefix}{i}"))).collect::<Result<Vec<_>>>()?;
            filters.push(Filter::from_params(arch, shape[0], hidden, params)?);
        }
        let bank = FilterBank::from_filters(filters, &shape, seed)?;
        Ok(Self { model, bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        dtns::save(path, &self.to_records()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(dtns::load(path)?)
    }
}
