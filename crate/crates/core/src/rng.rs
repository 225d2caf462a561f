//! Seed streams. Every random draw in the crate comes from a ChaCha8 stream
//! keyed by a master seed and a path of indices, so results never depend on
//! evaluation order or thread count.

use drift_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a path of stream indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Gaussian draw normalized to unit Euclidean length.
pub fn unit_gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    loop {
        let t = gaussian(rng, shape);
        let n = t.norm_l2();
        if n > 0.0 {
            return t.scale(1.0 / n);
        }
    }
}

/// `count` orthonormal directions via Gram-Schmidt on seeded Gaussian draws.
pub fn orthonormal_directions(rng: &mut impl Rng, shape: &[usize], count: usize) -> Vec<Tensor> {
    let mut dirs: Vec<Tensor> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v = gaussian(rng, shape);
        for d in &dirs {
            let c = v.dot(d);
            v.axpy(-c, d);
        }
        let n = v.norm_l2();
        if n > 1e-8 {
            dirs.push(v.scale(1.0 / n));
        }
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }

    #[test]
    fn directions_are_orthonormal() {
        let mut rng = stream(3, &[]);
        let d = orthonormal_directions(&mut rng, &[3, 4, 4], 10);
        for i in 0..10 {
            for j in 0..10 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d[i].dot(&d[j]) - expect).abs() < 1e-12);
            }
        }
    }
}
