//! Accuracy, Δ metrics, distribution metrics, prediction-overlap sets and the scaling study.

pub mod delta;
pub mod fid;
pub mod scaling;

use std::collections::BTreeSet;

use image::imageops::FilterType;
use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::encoder::cosine;

pub use delta::{delta1, delta2};
pub use fid::{fid, fid_from_stats, FeatureCloud};

/// `100 · #correct / n`.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions, {} labels", predictions.len(), labels.len())));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, images: &[RgbImage]) -> Result<Vec<DVector<f64>>>;
}

/// Random linear map over a downsampled, centred image.
pub struct ToyLinearEmbedder {
    grid: u32,
    w: DMatrix<f64>,
}

impl ToyLinearEmbedder {
    pub fn new(dim: usize, grid: u32, seed: u64) -> Self {
        let k = (grid * grid * 3) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid std");
        ToyLinearEmbedder { grid, w: DMatrix::from_fn(dim, k, |_, _| n.sample(&mut rng)) }
    }
}

impl Default for ToyLinearEmbedder {
    fn default() -> Self {
        ToyLinearEmbedder::new(16, 4, 0)
    }
}

impl EmbeddingBackend for ToyLinearEmbedder {
    fn name(&self) -> &str {
        "toy-linear"
    }

    fn embed(&self, images: &[RgbImage]) -> Result<Vec<DVector<f64>>> {
        Ok(images
            .iter()
            .map(|img| {
                let small = image::imageops::resize(img, self.grid, self.grid, FilterType::Triangle);
                let x = DVector::from_iterator(small.as_raw().len(), small.as_raw().iter().map(|&b| b as f64 / 255.0 - 0.5));
                &self.w * x
            })
            .collect())
    }
}

/// Mean RGB in [0, 1]. Pure red and pure green embed orthogonally.
pub struct MeanColorEmbedder;

impl EmbeddingBackend for MeanColorEmbedder {
    fn name(&self) -> &str {
        "mean-color"
    }

    fn embed(&self, images: &[RgbImage]) -> Result<Vec<DVector<f64>>> {
        images
            .iter()
            .map(|img| {
                let n = (img.width() * img.height()) as f64;
                if n == 0.0 {
                    return Err(Error::EmptyInput("image"));
                }
                let mut s = [0.0; 3];
                for p in img.pixels() {
                    for c in 0..3 {
                        s[c] += p[c] as f64 / 255.0;
                    }
                }
                Ok(DVector::from_iterator(3, s.iter().map(|v| v / n)))
            })
            .collect()
    }
}

pub fn feature_cloud(backend: &dyn EmbeddingBackend, images: &[RgbImage]) -> Result<FeatureCloud> {
    FeatureCloud::from_rows(backend.name(), &backend.embed(images)?)
}

/// Mean cosine between each synthetic image and its parent real image.
pub fn pairwise_cosine_score(backend: &dyn EmbeddingBackend, synthetic: &[RgbImage], parents: &[RgbImage]) -> Result<f64> {
    if synthetic.is_empty() {
        return Err(Error::EmptyInput("image pairs"));
    }
    if synthetic.len() != parents.len() {
        return Err(Error::DimensionMismatch(format!("{} synthetic vs {} parents", synthetic.len(), parents.len())));
    }
    let a = backend.embed(synthetic)?;
    let b = backend.embed(parents)?;
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        total += cosine(x, y)?;
    }
    Ok(total / a.len() as f64)
}

pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// Root-mean-square difference of channel values scaled to [0, 1].
pub struct PixelL2;

impl PerceptualBackend for PixelL2 {
    fn name(&self) -> &str {
        "pixel-l2"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if a.dimensions() != b.dimensions() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
        }
        let n = a.as_raw().len();
        if n == 0 {
            return Ok(0.0);
        }
        let ss: f64 = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(&x, &y)| ((x as f64 - y as f64) / 255.0).powi(2))
            .sum();
        Ok((ss / n as f64).sqrt())
    }
}

pub fn lpips_score(backend: &dyn PerceptualBackend, synthetic: &[RgbImage], real: &[RgbImage]) -> Result<f64> {
    if synthetic.is_empty() {
        return Err(Error::EmptyInput("image pairs"));
    }
    if synthetic.len() != real.len() {
        return Err(Error::DimensionMismatch(format!("{} synthetic vs {} real", synthetic.len(), real.len())));
    }
    let mut total = 0.0;
    for (s, r) in synthetic.iter().zip(real) {
        total += backend.distance(s, r)?;
    }
    Ok(total / synthetic.len() as f64)
}

/// Test-sample ids a regime classified correctly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub regime: String,
    /// Serialized as a sorted list.
    pub correct: BTreeSet<String>,
}

impl PredictionSet {
    pub fn new(regime: impl Into<String>, correct: impl IntoIterator<Item = String>) -> Self {
        PredictionSet { regime: regime.into(), correct: correct.into_iter().collect() }
    }

    /// Errors if any id lies outside `universe`.
    pub fn check_universe(&self, universe: &BTreeSet<String>) -> Result<()> {
        match self.correct.iter().find(|id| !universe.contains(*id)) {
            Some(id) => Err(Error::UnknownItem(id.clone())),
            None => Ok(()),
        }
    }
}

/// `|A∩B| / |A|`.
pub fn inclusion_coefficient(a: &PredictionSet, b: &PredictionSet) -> Result<f64> {
    if a.correct.is_empty() {
        return Err(Error::EmptyInput("set A"));
    }
    Ok(a.correct.intersection(&b.correct).count() as f64 / a.correct.len() as f64)
}

/// `|A∩B| / |A∪B|`.
pub fn jaccard(a: &PredictionSet, b: &PredictionSet) -> Result<f64> {
    let union = a.correct.union(&b.correct).count();
    if union == 0 {
        return Err(Error::EmptyInput("both sets"));
    }
    Ok(a.correct.intersection(&b.correct).count() as f64 / union as f64)
}

/// `m[i][j] = metric(sets[i], sets[j])`.
pub fn overlap_matrix(sets: &[PredictionSet], metric: fn(&PredictionSet, &PredictionSet) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    sets.iter().map(|a| sets.iter().map(|b| metric(a, b)).collect()).collect()
}

/// One metric line in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub subject: String,
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn set(ids: &[u32]) -> PredictionSet {
        PredictionSet::new("r", ids.iter().map(|i| i.to_string()))
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        let p: Vec<usize> = (0..10).collect();
        let l: Vec<usize> = (0..10).map(|i| if i % 2 == 0 { i } else { 99 }).collect();
        assert_eq!(top1_accuracy(&p, &l).unwrap(), 50.0);
        assert!(matches!(top1_accuracy(&[], &[]), Err(Error::EmptyInput(_))));
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn set_examples() {
        assert_eq!(inclusion_coefficient(&set(&[1, 2, 3, 4]), &set(&[3, 4, 5])).unwrap(), 0.5);
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])).unwrap(), 0.5);
        assert_eq!(inclusion_coefficient(&set(&[1, 2]), &set(&[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[2])).unwrap(), 0.0);
        assert!(inclusion_coefficient(&set(&[]), &set(&[1])).is_err());
        assert!(jaccard(&set(&[]), &set(&[])).is_err());
    }

    #[test]
    fn overlap_matrix_diagonal_is_one() {
        let sets = [set(&[1, 2]), set(&[2, 3, 4]), set(&[5])];
        let m = overlap_matrix(&sets, jaccard).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i], 1.0);
        }
        assert_eq!(m[0][1], m[1][0]);
    }

    #[test]
    fn prediction_set_serializes_sorted() {
        let s = PredictionSet::new("syn-F", ["b".to_string(), "a".to_string(), "c".to_string()]);
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"regime":"syn-F","correct":["a","b","c"]}"#);
        let universe: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(s.check_universe(&universe), Err(Error::UnknownItem(id)) if id == "c"));
    }

    #[test]
    fn cosine_score_examples() {
        let red = RgbImage::from_pixel(4, 4, Rgb([255, 0, 0]));
        let green = RgbImage::from_pixel(4, 4, Rgb([0, 255, 0]));
        let pics = vec![red.clone(), green.clone()];
        assert!((pairwise_cosine_score(&MeanColorEmbedder, &pics, &pics).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pairwise_cosine_score(&MeanColorEmbedder, &[red], &[green]).unwrap(), 0.0);
        let black = RgbImage::new(2, 2);
        assert!(matches!(pairwise_cosine_score(&MeanColorEmbedder, &[black.clone()], &[black]), Err(Error::ZeroNorm)));
        let toy = ToyLinearEmbedder::default();
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 30, y as u8 * 30, 7]));
        assert!((pairwise_cosine_score(&toy, &[img.clone()], &[img]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lpips_toy_examples() {
        let a = RgbImage::from_pixel(2, 1, Rgb([0, 0, 0]));
        assert_eq!(lpips_score(&PixelL2, &[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let mut b = a.clone();
        b.put_pixel(0, 0, Rgb([255, 0, 0]));
        // one channel of six differs by 1.0
        let expected = (1.0f64 / 6.0).sqrt();
        assert!((lpips_score(&PixelL2, &[b], &[a.clone()]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(lpips_score(&PixelL2, &[RgbImage::new(3, 1)], &[a]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn cloud_from_embedder() {
        let imgs: Vec<RgbImage> = (0..5).map(|i| RgbImage::from_pixel(3, 3, Rgb([i * 40, 10, 200 - i * 30]))).collect();
        let c = feature_cloud(&MeanColorEmbedder, &imgs).unwrap();
        assert_eq!((c.len(), c.dim()), (5, 3));
        assert!(fid(&c, &c).unwrap() <= 1e-8);
    }

    fn enumerate(a: &BTreeSet<u8>, b: &BTreeSet<u8>) -> (usize, usize) {
        let mut inter = 0;
        let mut uni = 0;
        for x in 0..=u8::MAX {
            let (ia, ib) = (a.contains(&x), b.contains(&x));
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
        (inter, uni)
    }

    proptest! {
        #[test]
        fn set_metrics_match_enumeration(a in proptest::collection::btree_set(0u8..40, 0..20), b in proptest::collection::btree_set(0u8..40, 0..20)) {
            let (pa, pb) = (PredictionSet::new("a", a.iter().map(|x| x.to_string())), PredictionSet::new("b", b.iter().map(|x| x.to_string())));
            let (inter, uni) = enumerate(&a, &b);
            if a.is_empty() {
                prop_assert!(inclusion_coefficient(&pa, &pb).is_err());
            } else {
                let ic = inclusion_coefficient(&pa, &pb).unwrap();
                prop_assert_eq!(ic, inter as f64 / a.len() as f64);
                prop_assert_eq!(ic == 1.0, a.is_subset(&b));
            }
            if uni == 0 {
                prop_assert!(jaccard(&pa, &pb).is_err());
            } else {
                let j = jaccard(&pa, &pb).unwrap();
                prop_assert_eq!(j, inter as f64 / uni as f64);
                prop_assert_eq!(j, jaccard(&pb, &pa).unwrap());
                prop_assert_eq!(j == 1.0, a == b);
            }
        }

        #[test]
        fn accuracy_matches_counting(p in proptest::collection::vec(0usize..4, 1..50), seed in 0u64..100) {
            let l: Vec<usize> = p.iter().enumerate().map(|(i, &x)| if (i as u64 + seed) % 3 == 0 { x } else { (x + 1) % 4 }).collect();
            let count = p.iter().zip(&l).filter(|(a, b)| a == b).count();
            prop_assert_eq!(top1_accuracy(&p, &l).unwrap(), 100.0 * count as f64 / p.len() as f64);
        }
    }
}
