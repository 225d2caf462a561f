use drift_tensor::Tensor;

use crate::error::{domain, Result};

/// Labelled images `[c, h, w]` with stable sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(domain("dataset columns have different lengths"));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|t| t.shape() != first.shape()) {
                return Err(domain("dataset images have mixed shapes"));
            }
        }
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}
