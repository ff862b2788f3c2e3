//! Fréchet distance between Gaussian fits of two feature clouds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REGULARIZATION: f64 = 1e-6;

/// n × d features from one extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCloud {
    pub extractor: String,
    pub features: DMatrix<f64>,
}

impl FeatureCloud {
    pub fn new(extractor: impl Into<String>, features: DMatrix<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("feature cloud has non-finite entries".into()));
        }
        Ok(FeatureCloud { extractor: extractor.into(), features })
    }

    pub fn from_rows(extractor: impl Into<String>, rows: &[DVector<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("feature rows differ in length".into()));
        }
        FeatureCloud::new(extractor, DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Mean and unbiased covariance.
    pub fn stats(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Precondition(format!("need at least 2 samples, have {n}")));
        }
        let mu: DVector<f64> = self.features.row_mean().transpose();
        let mut centred = self.features.clone();
        for mut row in centred.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok((mu, cov))
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `Tr((Σa Σb)^{1/2})` as the nuclear norm of `√Σb √Σa`.
///
/// Going through singular values avoids square-rooting the eigenvalues of `√Σa Σb √Σa`,
/// which turns round-off near zero into errors of order √ε for nearly singular covariances.
fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Option<f64> {
    let prod = psd_sqrt(sb)? * psd_sqrt(sa)?;
    let svd = prod.try_svd(false, false, f64::EPSILON, 0)?;
    let t = svd.singular_values.sum();
    t.is_finite().then_some(t)
}

/// Fréchet distance between N(μa, Σa) and N(μb, Σb).
///
/// Eigenvalues are clipped at zero; if a decomposition still fails both covariances get
/// `1e-6·I` added and the computation is retried once.
pub fn fid_from_stats(mu_a: &DVector<f64>, sigma_a: &DMatrix<f64>, mu_b: &DVector<f64>, sigma_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || sigma_a.shape() != (d, d) || sigma_b.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "mu {} / {}, sigma {:?} / {:?}",
            mu_a.len(),
            mu_b.len(),
            sigma_a.shape(),
            sigma_b.shape()
        )));
    }
    let mean_term = (mu_a - mu_b).norm_squared();
    let tr = match trace_sqrt_product(sigma_a, sigma_b) {
        Some(t) => sigma_a.trace() + sigma_b.trace() - 2.0 * t,
        None => {
            log::warn!("covariance square root failed; retrying with {REGULARIZATION} diagonal offset");
            let eye = DMatrix::<f64>::identity(d, d) * REGULARIZATION;
            let (ra, rb) = (sigma_a + &eye, sigma_b + &eye);
            let t = trace_sqrt_product(&ra, &rb)
                .ok_or_else(|| Error::Precondition("covariance square root failed after regularization".into()))?;
            ra.trace() + rb.trace() - 2.0 * t
        }
    };
    Ok((mean_term + tr).max(0.0))
}

pub fn fid(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let (ma, sa) = a.stats()?;
    let (mb, sb) = b.stats()?;
    fid_from_stats(&ma, &sa, &mb, &sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_cloud(n: usize, d: usize, seed: u64, shift: f64) -> FeatureCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mix = DMatrix::from_fn(d, d, |_, _| nd.sample(&mut rng) * 0.5);
        let raw = DMatrix::from_fn(n, d, |_, _| nd.sample(&mut rng));
        FeatureCloud::new("test", raw * mix.transpose() + DMatrix::from_element(n, d, shift)).unwrap()
    }

    fn closed_form_1d(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
        (m1 - m2).powi(2) + s1 * s1 + s2 * s2 - 2.0 * s1 * s2
    }

    #[test]
    fn identical_cloud_is_zero() {
        let c = gaussian_cloud(40, 6, 1, 0.3);
        assert!(fid(&c, &c).unwrap() <= 1e-8);
    }

    #[test]
    fn unit_mean_shift_1d() {
        let v = fid_from_stats(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diagonal_case_matches_per_dimension_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = rand_distr::Uniform::new(0.1, 3.0);
        let d = 7;
        let (m1, s1, m2, s2): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = (
            (0..d).map(|_| u.sample(&mut rng) - 1.5).collect(),
            (0..d).map(|_| u.sample(&mut rng)).collect(),
            (0..d).map(|_| u.sample(&mut rng) - 1.5).collect(),
            (0..d).map(|_| u.sample(&mut rng)).collect(),
        );
        let v = fid_from_stats(
            &DVector::from_vec(m1.clone()),
            &DMatrix::from_diagonal(&DVector::from_iterator(d, s1.iter().map(|s| s * s))),
            &DVector::from_vec(m2.clone()),
            &DMatrix::from_diagonal(&DVector::from_iterator(d, s2.iter().map(|s| s * s))),
        )
        .unwrap();
        let oracle: f64 = (0..d).map(|i| closed_form_1d(m1[i], s1[i], m2[i], s2[i])).sum();
        assert!((v - oracle).abs() < 1e-6, "{v} vs {oracle}");
    }

    #[test]
    fn errors() {
        let a = gaussian_cloud(5, 3, 0, 0.0);
        let b = gaussian_cloud(5, 4, 0, 0.0);
        assert!(matches!(fid(&a, &b), Err(Error::DimensionMismatch(_))));
        let one = FeatureCloud::new("x", DMatrix::zeros(1, 3)).unwrap();
        assert!(fid(&one, &a).is_err());
        assert!(FeatureCloud::new("x", DMatrix::from_element(2, 2, f64::NAN)).is_err());
    }

    #[test]
    fn rank_deficient_clouds_stay_non_negative() {
        // 3 samples in 8 dims: singular covariances.
        let a = gaussian_cloud(3, 8, 4, 0.0);
        let b = gaussian_cloud(3, 8, 5, 1.0);
        let v = fid(&a, &b).unwrap();
        assert!(v >= 0.0 && v.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn symmetric_and_non_negative(sa in 0u64..1000, sb in 0u64..1000, d in 1usize..6, shift in -2.0f64..2.0) {
            let a = gaussian_cloud(12, d, sa, 0.0);
            let b = gaussian_cloud(15, d, sb, shift);
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
            prop_assert!(fid(&a, &a).unwrap() <= 1e-8);
        }
    }
}
