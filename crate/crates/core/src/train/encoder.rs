//! Dual encoders with one adapter injection point each, and cosine-similarity classification.
//!
//! An encoder is a frozen feature extractor followed by a frozen linear projection `W0`; the
//! adapter is attached to that projection.

use image::imageops::FilterType;
use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::adapter::{adapted_forward, AdapterSet, LowRankAdapter};

pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Frozen features fed to the image projection.
    fn image_features(&self, image: &RgbImage) -> DVector<f64>;
    /// Frozen features fed to the text projection.
    fn text_features(&self, prompt: &str) -> DVector<f64>;
    fn image_projection(&self) -> &DMatrix<f64>;
    fn text_projection(&self) -> &DMatrix<f64>;
    /// Frozen logit temperature.
    fn temperature(&self) -> f64;

    fn encode_image(&self, batch: &[RgbImage], adapters: Option<&AdapterSet>) -> Result<Vec<DVector<f64>>> {
        batch
            .iter()
            .map(|img| project(self.image_projection(), adapters.map(|a| &a.image), &self.image_features(img)))
            .collect()
    }

    fn encode_text(&self, prompts: &[String], adapters: Option<&AdapterSet>) -> Result<Vec<DVector<f64>>> {
        prompts
            .iter()
            .map(|p| project(self.text_projection(), adapters.map(|a| &a.text), &self.text_features(p)))
            .collect()
    }

    /// Zero-initialised adapters sized for this encoder.
    fn new_adapters(&self, rank: usize, alpha: f64, seed: u64) -> Result<AdapterSet> {
        let (wi, wt) = (self.image_projection(), self.text_projection());
        Ok(AdapterSet {
            image: LowRankAdapter::new(wi.nrows(), wi.ncols(), rank, alpha, seed)?,
            text: LowRankAdapter::new(wt.nrows(), wt.ncols(), rank, alpha, seed ^ 0x9E37_79B9_7F4A_7C15)?,
        })
    }

    /// sha256 over the frozen projections; used to prove training never touched them.
    fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in [self.image_projection(), self.text_projection()] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(self.temperature().to_le_bytes());
        format!("{:x}", h.finalize())
    }
}

fn project(w0: &DMatrix<f64>, adapter: Option<&LowRankAdapter>, x: &DVector<f64>) -> Result<DVector<f64>> {
    match adapter {
        Some(a) => adapted_forward(w0, a, x),
        None => {
            if w0.ncols() != x.len() {
                return Err(Error::ShapeMismatch(format!("W0 has {} columns, input has {}", w0.ncols(), x.len())));
            }
            Ok(w0 * x)
        }
    }
}

pub fn l2_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v / n)
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    Ok(l2_normalize(a)?.dot(&l2_normalize(b)?))
}

/// `logits[i][c] = cos(image_i, text_c) / temperature`.
pub fn classify(image_embeddings: &[DVector<f64>], class_text_embeddings: &[DVector<f64>], temperature: f64) -> Result<Vec<Vec<f64>>> {
    let texts: Vec<DVector<f64>> = class_text_embeddings.iter().map(l2_normalize).collect::<Result<_>>()?;
    image_embeddings
        .iter()
        .map(|img| {
            let u = l2_normalize(img)?;
            texts
                .iter()
                .map(|t| {
                    if t.len() != u.len() {
                        return Err(Error::ShapeMismatch(format!("{} vs {}", u.len(), t.len())));
                    }
                    Ok(u.dot(t) / temperature)
                })
                .collect()
        })
        .collect()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Small random-weight stand-in for a CLIP-like model.
///
/// Image features: the image resampled to `grid × grid`, centred, plus a bias term.
/// Text features: hashed character trigrams of the prompt, L2-normalised, plus a bias term.
pub struct ToyEncoder {
    grid: u32,
    text_buckets: usize,
    w_image: DMatrix<f64>,
    w_text: DMatrix<f64>,
    temperature: f64,
}

impl ToyEncoder {
    pub fn new(embed_dim: usize, grid: u32, text_buckets: usize, seed: u64) -> Self {
        let k_img = (grid * grid * 3) as usize + 1;
        let k_txt = text_buckets + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ni = Normal::new(0.0, 1.0 / (k_img as f64).sqrt()).expect("valid std");
        let nt = Normal::new(0.0, 1.0 / (k_txt as f64).sqrt()).expect("valid std");
        ToyEncoder {
            grid,
            text_buckets,
            w_image: DMatrix::from_fn(embed_dim, k_img, |_, _| ni.sample(&mut rng)),
            w_text: DMatrix::from_fn(embed_dim, k_txt, |_, _| nt.sample(&mut rng)),
            temperature: 0.07,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }
}

impl Default for ToyEncoder {
    fn default() -> Self {
        ToyEncoder::new(32, 4, 32, 0)
    }
}

impl EncoderBackend for ToyEncoder {
    fn name(&self) -> &str {
        "toy-encoder"
    }

    fn image_features(&self, image: &RgbImage) -> DVector<f64> {
        let small = image::imageops::resize(image, self.grid, self.grid, FilterType::Triangle);
        let mut v: Vec<f64> = small.as_raw().iter().map(|&b| b as f64 / 255.0 - 0.5).collect();
        v.push(1.0);
        DVector::from_vec(v)
    }

    fn text_features(&self, prompt: &str) -> DVector<f64> {
        let mut v = vec![0.0; self.text_buckets];
        let chars: Vec<char> = format!("  {}  ", prompt.to_lowercase()).chars().collect();
        for w in chars.windows(3) {
            let s: String = w.iter().collect();
            let d = Sha256::digest(s.as_bytes());
            let idx = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as usize % self.text_buckets;
            v[idx] += 1.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mut out: Vec<f64> = v.into_iter().map(|x| x / n).collect();
        out.push(1.0);
        DVector::from_vec(out)
    }

    fn image_projection(&self) -> &DMatrix<f64> {
        &self.w_image
    }

    fn text_projection(&self) -> &DMatrix<f64> {
        &self.w_text
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }
}
