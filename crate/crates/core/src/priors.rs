//! Raw priors (diffusion output or a flat colour-bank raster) and their composites with the
//! real photo.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maps::dilate_mask;
use crate::model::{AttributeCategory, ClassEntry, PromptRecord};
use crate::prompts::render_prompt;
use crate::raster::{ensure_same, flat_rgb, resize_rgb, Mask};

/// Keyword → RGB lookup, case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ColorBank {
    entries: BTreeMap<String, [u8; 3]>,
}

const NAMED_COLORS: &[(&str, [u8; 3])] = &[
    ("aliceblue", [240, 248, 255]),
    ("antiquewhite", [250, 235, 215]),
    ("aqua", [0, 255, 255]),
    ("aquamarine", [127, 255, 212]),
    ("azure", [240, 255, 255]),
    ("beige", [245, 245, 220]),
    ("bisque", [255, 228, 196]),
    ("black", [0, 0, 0]),
    ("blanchedalmond", [255, 235, 205]),
    ("blue", [0, 0, 255]),
    ("blueviolet", [138, 43, 226]),
    ("brown", [165, 42, 42]),
    ("burlywood", [222, 184, 135]),
    ("cadetblue", [95, 158, 160]),
    ("chartreuse", [127, 255, 0]),
    ("chocolate", [210, 105, 30]),
    ("coral", [255, 127, 80]),
    ("cornflowerblue", [100, 149, 237]),
    ("cornsilk", [255, 248, 220]),
    ("crimson", [220, 20, 60]),
    ("cyan", [0, 255, 255]),
    ("darkblue", [0, 0, 139]),
    ("darkcyan", [0, 139, 139]),
    ("darkgoldenrod", [184, 134, 11]),
    ("darkgray", [169, 169, 169]),
    ("darkgreen", [0, 100, 0]),
    ("darkgrey", [169, 169, 169]),
    ("darkkhaki", [189, 183, 107]),
    ("darkmagenta", [139, 0, 139]),
    ("darkolivegreen", [85, 107, 47]),
    ("darkorange", [255, 140, 0]),
    ("darkorchid", [153, 50, 204]),
    ("darkred", [139, 0, 0]),
    ("darksalmon", [233, 150, 122]),
    ("darkseagreen", [143, 188, 143]),
    ("darkslateblue", [72, 61, 139]),
    ("darkslategray", [47, 79, 79]),
    ("darkslategrey", [47, 79, 79]),
    ("darkturquoise", [0, 206, 209]),
    ("darkviolet", [148, 0, 211]),
    ("deeppink", [255, 20, 147]),
    ("deepskyblue", [0, 191, 255]),
    ("dimgray", [105, 105, 105]),
    ("dimgrey", [105, 105, 105]),
    ("dodgerblue", [30, 144, 255]),
    ("firebrick", [178, 34, 34]),
    ("floralwhite", [255, 250, 240]),
    ("forestgreen", [34, 139, 34]),
    ("fuchsia", [255, 0, 255]),
    ("gainsboro", [220, 220, 220]),
    ("ghostwhite", [248, 248, 255]),
    ("gold", [255, 215, 0]),
    ("goldenrod", [218, 165, 32]),
    ("gray", [128, 128, 128]),
    ("green", [0, 128, 0]),
    ("greenyellow", [173, 255, 47]),
    ("grey", [128, 128, 128]),
    ("honeydew", [240, 255, 240]),
    ("hotpink", [255, 105, 180]),
    ("indianred", [205, 92, 92]),
    ("indigo", [75, 0, 130]),
    ("ivory", [255, 255, 240]),
    ("khaki", [240, 230, 140]),
    ("lavender", [230, 230, 250]),
    ("lavenderblush", [255, 240, 245]),
    ("lawngreen", [124, 252, 0]),
    ("lemonchiffon", [255, 250, 205]),
    ("lightblue", [173, 216, 230]),
    ("lightcoral", [240, 128, 128]),
    ("lightcyan", [224, 255, 255]),
    ("lightgoldenrodyellow", [250, 250, 210]),
    ("lightgray", [211, 211, 211]),
    ("lightgreen", [144, 238, 144]),
    ("lightgrey", [211, 211, 211]),
    ("lightpink", [255, 182, 193]),
    ("lightsalmon", [255, 160, 122]),
    ("lightseagreen", [32, 178, 170]),
    ("lightskyblue", [135, 206, 250]),
    ("lightslategray", [119, 136, 153]),
    ("lightslategrey", [119, 136, 153]),
    ("lightsteelblue", [176, 196, 222]),
    ("lightyellow", [255, 255, 224]),
    ("lime", [0, 255, 0]),
    ("limegreen", [50, 205, 50]),
    ("linen", [250, 240, 230]),
    ("magenta", [255, 0, 255]),
    ("maroon", [128, 0, 0]),
    ("mediumaquamarine", [102, 205, 170]),
    ("mediumblue", [0, 0, 205]),
    ("mediumorchid", [186, 85, 211]),
    ("mediumpurple", [147, 112, 219]),
    ("mediumseagreen", [60, 179, 113]),
    ("mediumslateblue", [123, 104, 238]),
    ("mediumspringgreen", [0, 250, 154]),
    ("mediumturquoise", [72, 209, 204]),
    ("mediumvioletred", [199, 21, 133]),
    ("midnightblue", [25, 25, 112]),
    ("mintcream", [245, 255, 250]),
    ("mistyrose", [255, 228, 225]),
    ("moccasin", [255, 228, 181]),
    ("navajowhite", [255, 222, 173]),
    ("navy", [0, 0, 128]),
    ("oldlace", [253, 245, 230]),
    ("olive", [128, 128, 0]),
    ("olivedrab", [107, 142, 35]),
    ("orange", [255, 165, 0]),
    ("orangered", [255, 69, 0]),
    ("orchid", [218, 112, 214]),
    ("palegoldenrod", [238, 232, 170]),
    ("palegreen", [152, 251, 152]),
    ("paleturquoise", [175, 238, 238]),
    ("palevioletred", [219, 112, 147]),
    ("papayawhip", [255, 239, 213]),
    ("peachpuff", [255, 218, 185]),
    ("peru", [205, 133, 63]),
    ("pink", [255, 192, 203]),
    ("plum", [221, 160, 221]),
    ("powderblue", [176, 224, 230]),
    ("purple", [128, 0, 128]),
    ("rebeccapurple", [102, 51, 153]),
    ("red", [255, 0, 0]),
    ("rosybrown", [188, 143, 143]),
    ("royalblue", [65, 105, 225]),
    ("saddlebrown", [139, 69, 19]),
    ("salmon", [250, 128, 114]),
    ("sandybrown", [244, 164, 96]),
    ("seagreen", [46, 139, 87]),
    ("seashell", [255, 245, 238]),
    ("sienna", [160, 82, 45]),
    ("silver", [192, 192, 192]),
    ("skyblue", [135, 206, 235]),
    ("slateblue", [106, 90, 205]),
    ("slategray", [112, 128, 144]),
    ("slategrey", [112, 128, 144]),
    ("snow", [255, 250, 250]),
    ("springgreen", [0, 255, 127]),
    ("steelblue", [70, 130, 180]),
    ("tan", [210, 180, 140]),
    ("teal", [0, 128, 128]),
    ("thistle", [216, 191, 216]),
    ("tomato", [255, 99, 71]),
    ("turquoise", [64, 224, 208]),
    ("violet", [238, 130, 238]),
    ("wheat", [245, 222, 179]),
    ("white", [255, 255, 255]),
    ("whitesmoke", [245, 245, 245]),
    ("yellow", [255, 255, 0]),
    ("yellowgreen", [154, 205, 50]),
];

/// Vehicle and coat colours that show up in generated colour prompts but are not named web colours.
const EXTRA_COLORS: &[(&str, [u8; 3])] = &[
    ("neon pink", [255, 16, 240]),
    ("neon green", [57, 255, 20]),
    ("neon yellow", [207, 255, 4]),
    ("neon orange", [255, 95, 31]),
    ("matte black", [28, 28, 28]),
    ("pearl white", [234, 234, 226]),
    ("metallic silver", [170, 169, 173]),
    ("gunmetal gray", [83, 86, 84]),
    ("champagne", [247, 231, 206]),
    ("burgundy", [128, 0, 32]),
    ("cream", [255, 253, 208]),
    ("fawn", [229, 170, 112]),
    ("ginger", [176, 101, 0]),
    ("cinnamon", [210, 105, 30]),
    ("blue gray", [102, 153, 204]),
    ("lilac", [200, 162, 200]),
    ("seal brown", [89, 38, 11]),
    ("chocolate brown", [123, 63, 0]),
    ("racing green", [0, 66, 37]),
    ("electric blue", [125, 249, 255]),
    ("lime green", [50, 205, 50]),
    ("bright orange", [255, 140, 26]),
    ("sky blue", [135, 206, 235]),
    ("navy blue", [0, 0, 128]),
    ("dark blue", [0, 0, 139]),
    ("dark green", [0, 100, 0]),
    ("dark red", [139, 0, 0]),
    ("light blue", [173, 216, 230]),
    ("light gray", [211, 211, 211]),
    ("hot pink", [255, 105, 180]),
];

fn normalize_key(keyword: &str) -> String {
    keyword
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl ColorBank {
    /// Named web colours plus common vehicle/coat colour names.
    pub fn standard() -> Self {
        let mut bank = ColorBank::default();
        for (name, rgb) in NAMED_COLORS.iter().chain(EXTRA_COLORS) {
            bank.insert(name, *rgb);
        }
        bank
    }

    pub fn insert(&mut self, keyword: &str, rgb: [u8; 3]) {
        self.entries.insert(normalize_key(keyword), rgb);
    }

    /// Case- and whitespace-insensitive lookup. Multi-word keywords also match their
    /// space-free spelling ("dark blue" → "darkblue").
    pub fn lookup(&self, keyword: &str) -> Option<[u8; 3]> {
        let key = normalize_key(keyword);
        self.entries
            .get(&key)
            .or_else(|| self.entries.get(&key.replace(' ', "")))
            .copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `keyword, R, G, B` entry per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bank = ColorBank::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Config(format!("color bank line {}: expected `keyword, R, G, B`", i + 1));
            if parts.len() != 4 || parts[0].is_empty() {
                return Err(bad());
            }
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().zip(&parts[1..]) {
                *c = v.parse().map_err(|_| bad())?;
            }
            bank.insert(parts[0], rgb);
        }
        Ok(bank)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, [r, g, b]) in &self.entries {
            let _ = writeln!(out, "{k}, {r}, {g}, {b}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Diffusion,
    ColorBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPrior {
    pub image: RgbImage,
    pub source: PriorSource,
    pub prompt_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeParams {
    DilationPx(u32),
    Alpha(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealPrior {
    pub image: RgbImage,
    pub category: AttributeCategory,
    pub parent_real_id: String,
    pub prompt_id: String,
    pub params: CompositeParams,
}

pub trait DiffusionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn text_to_image(&self, prompt: &str, seed: u64, steps: u32, width: u32, height: u32) -> Result<RgbImage>;
}

/// Call `f(seed)`, retrying once with `seed + 1` on failure.
pub(crate) fn with_retry<T>(what: &str, seed: u64, mut f: impl FnMut(u64) -> Result<T>) -> Result<T> {
    match f(seed) {
        Ok(v) => Ok(v),
        Err(first) => {
            log::warn!("{what} failed with seed {seed}: {first}; retrying with seed {}", seed + 1);
            f(seed + 1)
        }
    }
}

/// Build the raw prior for an accepted prompt: colour prompts map to a flat bank colour,
/// background and texture prompts go through the diffusion backend.
#[allow(clippy::too_many_arguments)]
pub fn make_raw_prior(
    prompt: &PromptRecord,
    class: &ClassEntry,
    backend: &dyn DiffusionBackend,
    bank: &ColorBank,
    seed: u64,
    steps: u32,
    width: u32,
    height: u32,
) -> Result<RawPrior> {
    if !prompt.is_accepted() {
        return Err(Error::Precondition(format!("prompt {} is not accepted", prompt.prompt_id)));
    }
    let (image, source) = match prompt.category {
        AttributeCategory::Color => {
            let rgb = bank
                .lookup(&prompt.keyword)
                .ok_or_else(|| Error::UnknownColor(prompt.keyword.clone()))?;
            (flat_rgb(width, height, rgb), PriorSource::ColorBank)
        }
        AttributeCategory::Background | AttributeCategory::Texture => {
            let text = render_prompt(prompt, class);
            let img = with_retry("prior generation", seed, |s| backend.text_to_image(&text, s, steps, width, height))?;
            (img, PriorSource::Diffusion)
        }
    };
    Ok(RawPrior {
        image,
        source,
        prompt_id: prompt.prompt_id.clone(),
    })
}

fn fit_prior(raw_prior: &RgbImage, real: &RgbImage) -> RgbImage {
    let (w, h) = real.dimensions();
    resize_rgb(raw_prior, w, h)
}

/// Paste the real object, grown by `dilation_px`, onto the background prior.
pub fn compose_background_real_prior(
    real_image: &RgbImage,
    mask: &Mask,
    raw_prior: &RgbImage,
    dilation_px: u32,
) -> Result<RgbImage> {
    ensure_same(real_image.dimensions(), mask.dimensions(), "background composite mask")?;
    let prior = fit_prior(raw_prior, real_image);
    let region = dilate_mask(mask, dilation_px);
    Ok(RgbImage::from_fn(real_image.width(), real_image.height(), |x, y| {
        if region.get(x, y) {
            *real_image.get_pixel(x, y)
        } else {
            *prior.get_pixel(x, y)
        }
    }))
}

#[inline]
fn blend_channel(prior: u8, real: u8, alpha: f64) -> u8 {
    let v = alpha * prior as f64 + (1.0 - alpha) * real as f64;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Alpha-overlay the prior on the object; pixels outside the mask are the real image.
pub fn compose_foreground_real_prior(
    real_image: &RgbImage,
    mask: &Mask,
    raw_prior: &RgbImage,
    alpha: f32,
) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Precondition(format!("alpha {alpha} outside [0,1]")));
    }
    ensure_same(real_image.dimensions(), mask.dimensions(), "foreground composite mask")?;
    let prior = fit_prior(raw_prior, real_image);
    let alpha = alpha as f64;
    Ok(RgbImage::from_fn(real_image.width(), real_image.height(), |x, y| {
        let r = real_image.get_pixel(x, y);
        if !mask.get(x, y) {
            return *r;
        }
        let p = prior.get_pixel(x, y);
        Rgb([
            blend_channel(p[0], r[0], alpha),
            blend_channel(p[1], r[1], alpha),
            blend_channel(p[2], r[2], alpha),
        ])
    }))
}

/// Dispatch on category: background → dilated paste, colour/texture → alpha overlay.
pub fn compose_real_prior(
    category: AttributeCategory,
    real_image: &RgbImage,
    mask: &Mask,
    raw: &RawPrior,
    params: CompositeParams,
    parent_real_id: &str,
) -> Result<RealPrior> {
    let image = match (category, params) {
        (AttributeCategory::Background, CompositeParams::DilationPx(px)) => {
            compose_background_real_prior(real_image, mask, &raw.image, px)?
        }
        (AttributeCategory::Color | AttributeCategory::Texture, CompositeParams::Alpha(a)) => {
            compose_foreground_real_prior(real_image, mask, &raw.image, a)?
        }
        (c, p) => {
            return Err(Error::Config(format!("{c} edits cannot use composite parameter {p:?}")));
        }
    };
    Ok(RealPrior {
        image,
        category,
        parent_real_id: parent_real_id.to_string(),
        prompt_id: raw.prompt_id.clone(),
        params,
    })
}

/// File stem for a cached prior.
pub fn prior_cache_key(prompt_id: &str, real_image_id: &str, seed: u64) -> String {
    format!("{prompt_id}__{real_image_id}__{seed}")
}

pub(crate) fn text_seed(text: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) ^ seed
}

/// Deterministic stand-in for a text-to-image model: smooth value noise tinted by a palette
/// derived from the prompt text.
pub struct ProceduralDiffusion;

impl DiffusionBackend for ProceduralDiffusion {
    fn name(&self) -> &str {
        "procedural"
    }

    fn text_to_image(&self, prompt: &str, seed: u64, steps: u32, width: u32, height: u32) -> Result<RgbImage> {
        if steps == 0 {
            return Err(Error::Precondition("steps must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed(prompt, seed));
        let base: [f64; 3] = [rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0)];
        let grid = 4usize;
        let lattice: Vec<f64> = (0..(grid + 1) * (grid + 1)).map(|_| rng.gen_range(-40.0..40.0)).collect();
        Ok(RgbImage::from_fn(width, height, |x, y| {
            let fx = x as f64 / width.max(1) as f64 * grid as f64;
            let fy = y as f64 / height.max(1) as f64 * grid as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j.min(grid) * (grid + 1) + i.min(grid)];
            let n = at(ix, iy) * (1.0 - tx) * (1.0 - ty)
                + at(ix + 1, iy) * tx * (1.0 - ty)
                + at(ix, iy + 1) * (1.0 - tx) * ty
                + at(ix + 1, iy + 1) * tx * ty;
            Rgb(base.map(|b| (b + n).round().clamp(0.0, 255.0) as u8))
        }))
    }
}
