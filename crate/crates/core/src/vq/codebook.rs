//! Codebook storage and exact nearest-neighbour search.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A plain `K x d` codebook, used where no autograd is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, entries: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!("codebook must be non-empty, got {k}x{d}")));
        }
        if entries.len() != k * d {
            return Err(Error::shape((k, d), entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("codebook entries must be finite".into()));
        }
        Ok(Self { k, d, entries })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn nearest(&self, z: &[f32]) -> Result<u32> {
        if z.len() != self.d {
            return Err(Error::DimensionMismatch(format!("vector of dim {} vs codebook dim {}", z.len(), self.d)));
        }
        Ok(nearest_index(z, &self.entries, self.d))
    }

    /// Quantizes `n` row-major vectors, returning the replaced vectors and their indices.
    pub fn quantize(&self, z: &[f32]) -> Result<(Vec<f32>, Vec<u32>)> {
        if !z.len().is_multiple_of(self.d) {
            return Err(Error::DimensionMismatch(format!("{} values is not a multiple of dim {}", z.len(), self.d)));
        }
        let indices = nearest_indices(z, &self.entries, self.d);
        let zq = indices.iter().flat_map(|&i| self.entry(i as usize).iter().copied()).collect();
        Ok((zq, indices))
    }

    /// How often each entry is selected by `indices`.
    pub fn usage(&self, indices: &[u32]) -> Vec<usize> {
        let mut hist = vec![0; self.k];
        for &i in indices {
            hist[i as usize] += 1;
        }
        hist
    }
}

/// Index of the entry closest in squared Euclidean distance; the lowest index wins ties.
///
/// Partial-distance search: the running sum is abandoned as soon as it reaches
/// the best distance so far. Sums accumulate in dimension order, so completed
/// distances are bit-identical to a plain sequential scan.
pub fn nearest_index<T: Float>(z: &[T], entries: &[T], d: usize) -> u32 {
    let mut best = T::infinity();
    let mut best_i = 0u32;
    for (i, entry) in entries.chunks_exact(d).enumerate() {
        let mut acc = T::zero();
        let mut abandoned = false;
        for (a, b) in z.iter().zip(entry) {
            let diff = *a - *b;
            acc = acc + diff * diff;
            if acc >= best {
                abandoned = true;
                break;
            }
        }
        if !abandoned && acc < best {
            best = acc;
            best_i = i as u32;
        }
    }
    best_i
}

pub fn nearest_indices<T: Float>(z: &[T], entries: &[T], d: usize) -> Vec<u32> {
    z.chunks_exact(d).map(|v| nearest_index(v, entries, d)).collect()
}

/// Codebook indices of one `h x w` latent grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl IndexGrid {
    pub fn new(h: usize, w: usize, indices: Vec<u32>, k: usize) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::shape(h * w, indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::IndexOutOfRange { index: bad, size: k });
        }
        Ok(Self { h, w, indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(z: &[f32], entries: &[f32], d: usize) -> u32 {
        let mut best = (f32::INFINITY, 0u32);
        for (i, e) in entries.chunks(d).enumerate() {
            let dist: f32 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).fold(0.0, |acc, x| acc + x);
            if dist < best.0 {
                best = (dist, i as u32);
            }
        }
        best.1
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, d, n) = (32, 8, 1000);
        let entries: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(k, d, entries.clone()).unwrap();
        let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, idx) = cb.quantize(&z).unwrap();
        for (v, i) in z.chunks(d).zip(&idx) {
            assert_eq!(*i, exhaustive(v, &entries, d));
        }
    }

    #[test]
    fn fixed_point_and_ties() {
        let entries = vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 5.0, 5.0];
        let cb = Codebook::new(6, 2, entries).unwrap();
        assert_eq!(cb.nearest(&[5.0, 5.0]).unwrap(), 5);
        // Duplicate entries 1 and 2: lowest index wins.
        assert_eq!(cb.nearest(&[1.0, 1.0]).unwrap(), 1);
        // Equidistant from entries 0 and 1.
        assert_eq!(cb.nearest(&[0.5, 0.5]).unwrap(), 0);
        assert!(cb.nearest(&[1.0]).is_err());
    }

    #[test]
    fn single_entry_codebook() {
        let cb = Codebook::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let (zq, idx) = cb.quantize(&[9.0, 9.0, 9.0, -1.0, 0.0, 4.0]).unwrap();
        assert_eq!(idx, vec![0, 0]);
        assert_eq!(zq, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn index_grid_validates_range() {
        assert!(IndexGrid::new(1, 2, vec![0, 4], 4).is_err());
        assert!(IndexGrid::new(1, 2, vec![0, 3], 4).is_ok());
        assert!(IndexGrid::new(2, 2, vec![0, 3], 4).is_err());
    }
}
