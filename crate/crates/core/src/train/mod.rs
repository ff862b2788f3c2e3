//! Adapter fine-tuning of a dual-encoder classifier on real, synthetic, or mixed data.

pub mod adapter;
pub mod augment;
pub mod encoder;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::model::{FilterStatus, ImageKind, Manifest, Split, Stage};
use crate::prompts::class_prompt;
use crate::raster::load_rgb;
use adapter::AdapterSet;
use augment::Augmentation;
use encoder::{argmax, classify, EncoderBackend};
use image::RgbImage;

/// `λ·ce_real + (1−λ)·ce_syn`.
pub fn mixed_loss(ce_real: f64, ce_syn: f64, lambda_mix: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_mix) {
        return Err(Error::Precondition(format!("lambda {lambda_mix} outside [0,1]")));
    }
    if ce_real < 0.0 || ce_syn < 0.0 {
        return Err(Error::Precondition("cross-entropy must be non-negative".into()));
    }
    Ok(lambda_mix * ce_real + (1.0 - lambda_mix) * ce_syn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRegime {
    Real,
    Syn,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeasibilityRegime {
    #[serde(rename = "F")]
    Feasible,
    #[serde(rename = "IF")]
    Infeasible,
    #[serde(rename = "Mix")]
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regime {
    pub data: DataRegime,
    pub feasibility: FeasibilityRegime,
}

impl Regime {
    pub fn new(data: DataRegime, feasibility: FeasibilityRegime) -> Self {
        Regime { data, feasibility }
    }

    pub fn uses_real(self) -> bool {
        matches!(self.data, DataRegime::Real | DataRegime::Mixed)
    }

    pub fn uses_syn(self) -> bool {
        matches!(self.data, DataRegime::Syn | DataRegime::Mixed)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.data {
            DataRegime::Real => "real",
            DataRegime::Syn => "syn",
            DataRegime::Mixed => "mixed",
        };
        let v = match self.feasibility {
            FeasibilityRegime::Feasible => "F",
            FeasibilityRegime::Infeasible => "IF",
            FeasibilityRegime::Mix => "Mix",
        };
        write!(f, "{d}-{v}")
    }
}

/// `real`, `syn-F`, `mixed-IF`, `syn-mix`, ...
impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (d, f) = lower.split_once('-').unwrap_or((lower.as_str(), "mix"));
        let data = match d {
            "real" => DataRegime::Real,
            "syn" => DataRegime::Syn,
            "mixed" => DataRegime::Mixed,
            _ => return Err(Error::Config(format!("unknown data regime `{d}`"))),
        };
        let feasibility = match f {
            "f" => FeasibilityRegime::Feasible,
            "if" => FeasibilityRegime::Infeasible,
            "mix" => FeasibilityRegime::Mix,
            _ => return Err(Error::Config(format!("unknown feasibility regime `{f}`"))),
        };
        Ok(Regime { data, feasibility })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedBatching {
    /// One real batch and one synthetic batch per step, combined with λ.
    Paired,
    /// One batch drawn from the union of both pools, plain cross-entropy.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_mix: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_grid: Vec<f64>,
    pub weight_decay_grid: Vec<f64>,
    pub batch_size: usize,
    pub test_batch_size: usize,
    pub total_iterations: usize,
    pub warmup_fraction: f64,
    pub min_lr: f64,
    /// Steps between validations; `None` means `total_iterations / 70`.
    pub validation_interval: Option<usize>,
    pub holdout_fraction: f64,
    pub augmentations: Vec<Augmentation>,
    pub rank: usize,
    pub alpha: f64,
    pub unit_scale: bool,
    pub mixed_batching: MixedBatching,
    pub seed: u64,
}

pub const LR_GRID: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];
pub const WEIGHT_DECAY_GRID: [f64; 3] = [1e-3, 1e-4, 5e-5];

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mix: 0.5,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_grid: LR_GRID.to_vec(),
            weight_decay_grid: WEIGHT_DECAY_GRID.to_vec(),
            batch_size: 64,
            test_batch_size: 8,
            total_iterations: 20700,
            warmup_fraction: 0.05,
            min_lr: 1e-8,
            validation_interval: None,
            holdout_fraction: 0.1,
            augmentations: Augmentation::ALL.to_vec(),
            rank: 16,
            alpha: 32.0,
            unit_scale: false,
            mixed_batching: MixedBatching::Paired,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning settings used for the Pets, Aircraft and Cars datasets.
    pub fn paper(dataset: &str) -> Result<Self> {
        let total_iterations = match dataset {
            "pets" => 20700,
            "airc" => 72000,
            "cars" => 91840,
            other => return Err(Error::Config(format!("no iteration budget for dataset `{other}`"))),
        };
        Ok(TrainConfig { total_iterations, ..TrainConfig::default() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return bad("lambda_mix must be in [0,1]");
        }
        if self.total_iterations == 0 || self.batch_size == 0 {
            return bad("total_iterations and batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0,1)");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0,1)");
        }
        if self.lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.lr {
            return bad("need 0 <= min_lr <= lr and lr > 0");
        }
        if self.validation_interval == Some(0) {
            return bad("validation_interval must be >= 1");
        }
        Ok(())
    }

    pub fn validation_every(&self) -> usize {
        self.validation_interval.unwrap_or((self.total_iterations / 70).max(1))
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_iterations as f64).ceil() as usize
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr`. Steps are 1-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step <= warm {
            return self.lr * step as f64 / warm as f64;
        }
        let span = (self.total_iterations - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub real: Vec<Example>,
    pub syn: Vec<Example>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_real: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_syn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_hash: String,
    pub regime: Regime,
    pub encoder: String,
    pub encoder_weights_hash: String,
    pub lambda_mix: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub adapters: AdapterSet,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
    pub best_val_acc: f64,
    pub best_step: usize,
    pub provenance: Provenance,
}

impl AdapterCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: AdapterCheckpoint,
    pub final_adapters: AdapterSet,
    pub log: Vec<LogRecord>,
}

pub fn write_log(log: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Gradients for the four adapter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub image_a: DMatrix<f64>,
    pub image_b: DMatrix<f64>,
    pub text_a: DMatrix<f64>,
    pub text_b: DMatrix<f64>,
}

impl AdapterGrads {
    pub fn zeros_like(ad: &AdapterSet) -> Self {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        AdapterGrads { image_a: z(&ad.image.a), image_b: z(&ad.image.b), text_a: z(&ad.text.a), text_b: z(&ad.text.b) }
    }
}

/// Mean cross-entropy of a batch of precomputed image features against the class prompts.
/// When `grads` is given, adds `weight · ∂loss/∂θ` for every adapter matrix.
pub fn batch_loss(
    enc: &dyn EncoderBackend,
    ad: &AdapterSet,
    batch: &[(DVector<f64>, usize)],
    text_x: &[DVector<f64>],
    weight: f64,
    mut grads: Option<&mut AdapterGrads>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let t = enc.temperature();
    let (wi, wt) = (enc.image_projection(), enc.text_projection());
    let (si, st) = (ad.image.scale(), ad.text.scale());

    let zt: Vec<DVector<f64>> = text_x.iter().map(|x| &ad.text.a * x).collect();
    let v: Vec<DVector<f64>> = text_x.iter().zip(&zt).map(|(x, z)| wt * x + (&ad.text.b * z) * st).collect();
    let vn: Vec<f64> = v.iter().map(|v| v.norm()).collect();
    if vn.contains(&0.0) {
        return Err(Error::ZeroNorm);
    }
    let vh: Vec<DVector<f64>> = v.iter().zip(&vn).map(|(v, n)| v / *n).collect();
    let d = wi.nrows();
    let mut g_vh = vec![DVector::<f64>::zeros(d); vh.len()];

    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (x, y) in batch {
        let z = &ad.image.a * x;
        let u = wi * x + (&ad.image.b * &z) * si;
        let un = u.norm();
        if un == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let uh = &u / un;
        let logits: Vec<f64> = vh.iter().map(|v| uh.dot(v) / t).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        loss += lse - logits[*y];

        if let Some(g) = grads.as_deref_mut() {
            let mut g_uh = DVector::<f64>::zeros(d);
            for (c, l) in logits.iter().enumerate() {
                let gl = ((l - lse).exp() - if c == *y { 1.0 } else { 0.0 }) * weight / n;
                g_uh += &vh[c] * (gl / t);
                g_vh[c] += &uh * (gl / t);
            }
            let g_u = (&g_uh - &uh * uh.dot(&g_uh)) / un;
            g.image_b += (&g_u * z.transpose()) * si;
            g.image_a += (ad.image.b.transpose() * &g_u * x.transpose()) * si;
        }
    }
    if let Some(g) = grads {
        for c in 0..vh.len() {
            let g_v = (&g_vh[c] - &vh[c] * vh[c].dot(&g_vh[c])) / vn[c];
            g.text_b += (&g_v * zt[c].transpose()) * st;
            g.text_a += (ad.text.b.transpose() * &g_v * text_x[c].transpose()) * st;
        }
    }
    Ok(loss / n)
}

struct AdamW {
    moments: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl AdamW {
    fn new(ad: &AdapterSet) -> Self {
        let z = |m: &DMatrix<f64>| (DMatrix::zeros(m.nrows(), m.ncols()), DMatrix::zeros(m.nrows(), m.ncols()));
        AdamW { moments: vec![z(&ad.image.a), z(&ad.image.b), z(&ad.text.a), z(&ad.text.b)], t: 0 }
    }

    fn step(&mut self, ad: &mut AdapterSet, g: &AdapterGrads, lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let params = [&mut ad.image.a, &mut ad.image.b, &mut ad.text.a, &mut ad.text.b];
        let grads = [&g.image_a, &g.image_b, &g.text_a, &g.text_b];
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.moments.iter_mut()) {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + EPS) + wd * p[i]);
            }
        }
    }
}

fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// One pool's training split plus its own RNG for shuffling, batching and augmentation, so a
/// pool's sample stream does not depend on whether another pool is in use.
struct Pool<'a> {
    train: Vec<&'a Example>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> Pool<'a> {
    fn new(examples: &'a [Example], tag: &str, cfg: &TrainConfig) -> (Self, Vec<&'a Example>) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, tag));
        let mut idx: Vec<usize> = (0..examples.len()).collect();
        idx.shuffle(&mut rng);
        let n_hold = ((examples.len() as f64) * cfg.holdout_fraction).floor() as usize;
        let n_hold = n_hold.min(examples.len().saturating_sub(1));
        let holdout: Vec<&Example> = idx[..n_hold].iter().map(|&i| &examples[i]).collect();
        let mut train_idx = idx[n_hold..].to_vec();
        train_idx.sort_unstable();
        let train: Vec<&Example> = train_idx.iter().map(|&i| &examples[i]).collect();
        let order = (0..train.len()).collect();
        (Pool { train, order, pos: usize::MAX, rng }, holdout)
    }

    fn batch(&mut self, n: usize, enc: &dyn EncoderBackend, augs: &[Augmentation]) -> Vec<(DVector<f64>, usize)> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let ex = self.train[self.order[self.pos]];
            self.pos += 1;
            let img = augment::apply(augs, &ex.image, &mut self.rng);
            out.push((enc.image_features(&img), ex.label));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub correct_ids: BTreeSet<String>,
}

/// Top-1 accuracy of zero-shot or adapted classification over `examples`.
pub fn evaluate(enc: &dyn EncoderBackend, adapters: Option<&AdapterSet>, examples: &[Example], class_names: &[String]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let prompts: Vec<String> = class_names.iter().map(|c| class_prompt(c)).collect();
    let text = enc.encode_text(&prompts, adapters)?;
    let images: Vec<RgbImage> = examples.iter().map(|e| e.image.clone()).collect();
    let emb = enc.encode_image(&images, adapters)?;
    let logits = classify(&emb, &text, enc.temperature())?;
    let predictions: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let accuracy = crate::eval::top1_accuracy(&predictions, &labels)?;
    let correct_ids = examples
        .iter()
        .zip(&predictions)
        .filter(|(e, p)| e.label == **p)
        .map(|(e, _)| e.id.clone())
        .collect();
    Ok(Evaluation { accuracy, predictions, correct_ids })
}

/// Train adapters for exactly `total_iterations` optimizer steps and keep the best-validating
/// weights. Validation uses the held-out part of each pool in use, or the training examples
/// when nothing is held out.
pub fn train_on(data: &TrainData, regime: Regime, enc: &dyn EncoderBackend, cfg: &TrainConfig, manifest_hash: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.class_names.is_empty() {
        return Err(Error::EmptyInput("class list"));
    }
    if regime.uses_real() && data.real.is_empty() {
        return Err(Error::EmptyPool(format!("{regime} needs real images")));
    }
    if regime.uses_syn() && data.syn.is_empty() {
        return Err(Error::EmptyPool(format!("{regime} needs accepted synthetic images")));
    }
    let frozen = enc.weights_hash();

    let mut val: Vec<Example> = Vec::new();
    let mut real_pool = None;
    let mut syn_pool = None;
    if regime.uses_real() {
        let (p, h) = Pool::new(&data.real, "real", cfg);
        val.extend(h.into_iter().cloned());
        real_pool = Some(p);
    }
    if regime.uses_syn() {
        let (p, h) = Pool::new(&data.syn, "syn", cfg);
        val.extend(h.into_iter().cloned());
        syn_pool = Some(p);
    }
    if val.is_empty() {
        for p in real_pool.iter().chain(syn_pool.iter()) {
            val.extend(p.train.iter().map(|e| (*e).clone()));
        }
    }

    let prompts: Vec<String> = data.class_names.iter().map(|c| class_prompt(c)).collect();
    let text_x: Vec<DVector<f64>> = prompts.iter().map(|p| enc.text_features(p)).collect();
    let mut adapters = enc.new_adapters(cfg.rank, cfg.alpha, stream_seed(cfg.seed, "adapters"))?;
    adapters.image.unit_scale = cfg.unit_scale;
    adapters.text.unit_scale = cfg.unit_scale;
    let mut opt = AdamW::new(&adapters);

    let mut best = (f64::NEG_INFINITY, 0usize, adapters.clone());
    let mut log = Vec::with_capacity(cfg.total_iterations);
    let every = cfg.validation_every();
    let augs = &cfg.augmentations;

    for step in 1..=cfg.total_iterations {
        let lr = cfg.lr_at(step);
        let mut g = AdapterGrads::zeros_like(&adapters);
        let (loss, ce_real, ce_syn) = match (real_pool.as_mut(), syn_pool.as_mut()) {
            (Some(r), Some(s)) if cfg.mixed_batching == MixedBatching::Paired => {
                let rb = r.batch(cfg.batch_size, enc, augs);
                let sb = s.batch(cfg.batch_size, enc, augs);
                let lam = cfg.lambda_mix;
                let cr = batch_loss(enc, &adapters, &rb, &text_x, lam, Some(&mut g))?;
                let cs = batch_loss(enc, &adapters, &sb, &text_x, 1.0 - lam, Some(&mut g))?;
                (mixed_loss(cr, cs, lam)?, Some(cr), Some(cs))
            }
            (Some(r), Some(s)) => {
                // Single mixed batch: split by pool sizes so both streams stay deterministic.
                let total = (r.train.len() + s.train.len()) as f64;
                let nr = ((cfg.batch_size as f64) * r.train.len() as f64 / total).round() as usize;
                let mut b = r.batch(nr, enc, augs);
                b.extend(s.batch(cfg.batch_size - nr, enc, augs));
                let l = batch_loss(enc, &adapters, &b, &text_x, 1.0, Some(&mut g))?;
                (l, None, None)
            }
            (Some(r), None) => {
                let b = r.batch(cfg.batch_size, enc, augs);
                let l = batch_loss(enc, &adapters, &b, &text_x, 1.0, Some(&mut g))?;
                (l, Some(l), None)
            }
            (None, Some(s)) => {
                let b = s.batch(cfg.batch_size, enc, augs);
                let l = batch_loss(enc, &adapters, &b, &text_x, 1.0, Some(&mut g))?;
                (l, None, Some(l))
            }
            (None, None) => unreachable!("regime uses at least one pool"),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(&mut adapters, &g, lr, cfg.weight_decay);

        let mut rec = LogRecord { step, loss, lr, ce_real, ce_syn, val_acc: None };
        if step % every == 0 || step == cfg.total_iterations {
            let acc = evaluate(enc, Some(&adapters), &val, &data.class_names)?.accuracy;
            rec.val_acc = Some(acc);
            if acc > best.0 {
                best = (acc, step, adapters.clone());
            }
        }
        log.push(rec);
    }

    if enc.weights_hash() != frozen {
        return Err(Error::Precondition("pretrained weights changed during training".into()));
    }
    let checkpoint = AdapterCheckpoint {
        adapters: best.2,
        class_names: data.class_names.clone(),
        config: cfg.clone(),
        best_val_acc: best.0,
        best_step: best.1,
        provenance: Provenance {
            manifest_hash: manifest_hash.to_string(),
            regime,
            encoder: enc.name().to_string(),
            encoder_weights_hash: frozen,
            lambda_mix: cfg.lambda_mix,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            iterations: cfg.total_iterations,
            seed: cfg.seed,
        },
    };
    Ok(TrainOutcome { checkpoint, final_adapters: adapters, log })
}

pub fn manifest_hash(manifest: &Manifest) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(crate::manifest::to_string(manifest)?.as_bytes())))
}

/// Class names ordered by class id; labels index into this list.
pub fn class_names(manifest: &Manifest) -> Vec<String> {
    let mut classes = manifest.classes.clone();
    classes.sort_by_key(|c| c.class_id);
    classes.into_iter().map(|c| c.name).collect()
}

fn label_of(manifest: &Manifest, class_id: u32) -> Result<usize> {
    let mut ids: Vec<u32> = manifest.classes.iter().map(|c| c.class_id).collect();
    ids.sort_unstable();
    ids.binary_search(&class_id)
        .map_err(|_| Error::Schema(format!("class {class_id} not in manifest")))
}

/// Load the images of a regime from the manifest. Rejected and indeterminate synthetic
/// images never enter a pool.
pub fn load_train_data(manifest: &Manifest, root: &Path, regime: Regime) -> Result<TrainData> {
    if regime.uses_syn() {
        manifest.require_stage(Stage::Filter)?;
    }
    let mut data = TrainData { class_names: class_names(manifest), ..Default::default() };
    for rec in &manifest.images {
        if rec.split != Split::Train {
            continue;
        }
        let wanted = match rec.kind {
            ImageKind::Real => regime.uses_real(),
            ImageKind::Synthetic => {
                regime.uses_syn()
                    && rec.filter_status == FilterStatus::Accepted
                    && rec
                        .prompt_id
                        .as_deref()
                        .and_then(|p| manifest.prompt(p))
                        .is_some_and(|p| match regime.feasibility {
                            FeasibilityRegime::Feasible => p.feasibility.is_feasible(),
                            FeasibilityRegime::Infeasible => !p.feasibility.is_feasible(),
                            FeasibilityRegime::Mix => true,
                        })
            }
        };
        if !wanted {
            continue;
        }
        let ex = Example { id: rec.image_id.clone(), image: load_rgb(root.join(&rec.path))?, label: label_of(manifest, rec.class_id)? };
        match rec.kind {
            ImageKind::Real => data.real.push(ex),
            ImageKind::Synthetic => data.syn.push(ex),
        }
    }
    Ok(data)
}

/// Test-split real images.
pub fn load_test_set(manifest: &Manifest, root: &Path) -> Result<Vec<Example>> {
    manifest
        .real_images(Split::Test)
        .map(|rec| Ok(Example { id: rec.image_id.clone(), image: load_rgb(root.join(&rec.path))?, label: label_of(manifest, rec.class_id)? }))
        .collect()
}

pub fn train(manifest: &Manifest, root: &Path, regime: Regime, enc: &dyn EncoderBackend, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = load_train_data(manifest, root, regime)?;
    train_on(&data, regime, enc, cfg, &manifest_hash(manifest)?)
}

/// Evaluate every (lr, wd) pair and return the best; ties prefer smaller lr, then smaller wd.
pub fn select_hyperparameters(lrs: &[f64], wds: &[f64], mut validation_fn: impl FnMut(f64, f64) -> Result<f64>) -> Result<(f64, f64)> {
    if lrs.is_empty() || wds.is_empty() {
        return Err(Error::EmptyInput("hyperparameter grid"));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &lr in lrs {
        for &wd in wds {
            let acc = validation_fn(lr, wd)?;
            let better = match best {
                None => true,
                Some((bacc, blr, bwd)) => acc > bacc || (acc == bacc && (lr < blr || (lr == blr && wd < bwd))),
            };
            if better {
                best = Some((acc, lr, wd));
            }
        }
    }
    let (_, lr, wd) = best.expect("grid is non-empty");
    Ok((lr, wd))
}
