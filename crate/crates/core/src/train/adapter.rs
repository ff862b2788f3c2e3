//! Low-rank adapters: `h = W0·x + s·B·A·x`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    /// r × k
    pub a: DMatrix<f64>,
    /// d × r
    pub b: DMatrix<f64>,
    pub alpha: f64,
    /// Use scale 1 regardless of alpha (the unscaled `W0x + BAx` form).
    #[serde(default)]
    pub unit_scale: bool,
}

impl LowRankAdapter {
    /// A ~ N(0, 1/k), B = 0.
    pub fn new(d: usize, k: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= d.min(k) {
            return Err(Error::ShapeMismatch(format!("rank {rank} must be in 1..min({d}, {k})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid std");
        Ok(LowRankAdapter {
            a: DMatrix::from_fn(rank, k, |_, _| normal.sample(&mut rng)),
            b: DMatrix::zeros(d, rank),
            alpha,
            unit_scale: false,
        })
    }

    pub fn from_parts(a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if a.nrows() != b.ncols() {
            return Err(Error::ShapeMismatch(format!("A is {}x{}, B is {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols())));
        }
        Ok(LowRankAdapter { a, b, alpha, unit_scale: false })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn scale(&self) -> f64 {
        if self.unit_scale {
            1.0
        } else {
            self.alpha / self.rank() as f64
        }
    }
}

/// `W0·x + s·B·(A·x)`.
pub fn adapted_forward(w0: &DMatrix<f64>, adapter: &LowRankAdapter, x: &DVector<f64>) -> Result<DVector<f64>> {
    if w0.ncols() != x.len() || adapter.in_dim() != x.len() || adapter.out_dim() != w0.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "W0 {}x{}, A {}x{}, B {}x{}, x {}",
            w0.nrows(),
            w0.ncols(),
            adapter.a.nrows(),
            adapter.a.ncols(),
            adapter.b.nrows(),
            adapter.b.ncols(),
            x.len()
        )));
    }
    let base = w0 * x;
    if adapter.b.iter().all(|&v| v == 0.0) {
        return Ok(base);
    }
    Ok(base + (&adapter.b * (&adapter.a * x)) * adapter.scale())
}

/// One adapter per encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub image: LowRankAdapter,
    pub text: LowRankAdapter,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_is_identity() {
        let w0 = DMatrix::from_fn(6, 9, |i, j| (i * 9 + j) as f64 * 0.1 - 2.0);
        let ad = LowRankAdapter::new(6, 9, 2, 4.0, 1).unwrap();
        let x = DVector::from_fn(9, |i, _| i as f64 - 3.5);
        assert_eq!(adapted_forward(&w0, &ad, &x).unwrap(), &w0 * &x);
    }

    #[test]
    fn hand_multiplied_example() {
        let w0 = DMatrix::<f64>::identity(2, 2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let ad = LowRankAdapter::from_parts(a, b, 1.0).unwrap();
        let h = adapted_forward(&w0, &ad, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(h, DVector::from_vec(vec![2.0, 2.0]));
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        let ad = LowRankAdapter::new(64, 64, 16, 32.0, 0).unwrap();
        assert_eq!(ad.scale(), 2.0);
        let literal = LowRankAdapter { unit_scale: true, ..ad };
        assert_eq!(literal.scale(), 1.0);
    }

    #[test]
    fn shape_errors() {
        let ad = LowRankAdapter::new(4, 5, 2, 2.0, 0).unwrap();
        let w0 = DMatrix::zeros(4, 5);
        assert!(matches!(adapted_forward(&w0, &ad, &DVector::zeros(4)), Err(Error::ShapeMismatch(_))));
        assert!(adapted_forward(&DMatrix::zeros(3, 5), &ad, &DVector::zeros(5)).is_err());
        assert!(LowRankAdapter::new(4, 5, 4, 1.0, 0).is_err());
        assert!(LowRankAdapter::from_parts(DMatrix::zeros(2, 3), DMatrix::zeros(3, 1), 1.0).is_err());
    }

    #[test]
    fn b_initialized_to_zero() {
        let ad = LowRankAdapter::new(8, 8, 3, 6.0, 5).unwrap();
        assert!(ad.b.iter().all(|&v| v == 0.0));
        assert!(ad.a.iter().any(|&v| v != 0.0));
    }
}
