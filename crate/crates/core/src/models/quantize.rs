//! Nearest-codebook quantisation of channel fibres.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// The `K × C̃` table of learnable code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    vectors: Tensor<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::shape(
                "codebook",
                format!("expected [K, C], got {:?}", vectors.shape()),
            ));
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("codebook entries must be finite".into()));
        }
        Ok(Self { vectors })
    }

    /// Uniform entries in `[−1/√C̃, 1/√C̃]`.
    pub fn random<R: Rng>(k: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let vectors = Tensor::from_fn(vec![k, dim], |_| {
            T::from_f64_lossy(rng.random_range(-bound..=bound))
        });
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.vectors
    }

    /// Index of the nearest code in Euclidean distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, fiber: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.len() {
            let d: f64 = self
                .row(i)
                .iter()
                .zip(fiber)
                .map(|(&e, &x)| {
                    let diff = x.as_f64() - e.as_f64();
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Replaces every channel fibre of `x_enc` (`[C,H,W]` or `[N,C,H,W]`) by
/// its nearest code vector. Returns the quantised tensor (same shape) and
/// the chosen code index of each fibre, in `(n, y, x)` order.
pub fn vq_quantize<T: Real>(
    x_enc: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, hw) = match *x_enc.shape() {
        [n, c, h, w] => (n, c, h * w),
        [c, h, w] => (1, c, h * w),
        ref s => return Err(Error::shape("vq_quantize", format!("encoded tensor {s:?}"))),
    };
    if c != codebook.dim() {
        return Err(Error::shape(
            "vq_quantize",
            format!(
                "{c} channels but codebook vectors have {} entries",
                codebook.dim()
            ),
        ));
    }
    let src = x_enc.data();
    let mut out = vec![T::zero(); src.len()];
    let mut indices = Vec::with_capacity(n * hw);
    let mut fiber = vec![T::zero(); c];
    for i in 0..n {
        for s in 0..hw {
            for (ch, f) in fiber.iter_mut().enumerate() {
                *f = src[(i * c + ch) * hw + s];
            }
            let k = codebook.nearest(&fiber);
            for (ch, &e) in codebook.row(k).iter().enumerate() {
                out[(i * c + ch) * hw + s] = e;
            }
            indices.push(k);
        }
    }
    Ok((Tensor::new(x_enc.shape().to_vec(), out)?, indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book() -> Codebook<f64> {
        Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn nearest_and_tie() {
        let b = book();
        assert_eq!(b.nearest(&[0.2, 0.1]), 0);
        assert_eq!(b.nearest(&[0.5, 0.5]), 0);
        assert_eq!(b.nearest(&[0.6, 0.5]), 1);
    }

    #[test]
    fn quantize_fibres() {
        // [C=2, H=1, W=2]: fibre 0 = (0.2, 0.1), fibre 1 = (0.9, 0.8)
        let x = Tensor::new(vec![2, 1, 2], vec![0.2, 0.9, 0.1, 0.8]).unwrap();
        let (q, idx) = vq_quantize(&x, &book()).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(q.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Tensor::new(vec![3, 1, 1], vec![0.0; 3]).unwrap();
        assert!(vq_quantize(&x, &book()).is_err());
    }
}
