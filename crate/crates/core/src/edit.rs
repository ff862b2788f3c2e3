//! Attribute edits: single-stage inpainting for backgrounds, inpaint followed by
//! structure-controlled generation for colour and texture, then paste-back of the protected
//! region from the original photo.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{canny_from_foreground, invert_mask, CannyMap, CANNY_HIGH, CANNY_LOW};
use crate::model::{
    AttributeCategory, ClassEntry, Feasibility, FilterStatus, GenerationJob, ImageKind, ImageRecord, Manifest,
    PromptRecord,
};
use crate::priors::{
    compose_real_prior, make_raw_prior, prior_cache_key, text_seed, with_retry, ColorBank, CompositeParams,
    DiffusionBackend, PriorSource, RawPrior,
};
use crate::prompts::render_prompt;
use crate::raster::{crop, ensure_same, load_mask, load_rgb, reflect_pad, reflect_pad_mask, resize_rgb, save_rgb, working_size, Mask};

const PRESETS: &str = include_str!("../resources/edit_presets.toml");

/// Which images condition the second (structure-controlled) stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Stage1,
    RawPrior,
    RealPrior,
}

/// Fully resolved parameters for one (dataset, category, feasibility) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub inpaint_guidance_scale: f32,
    pub control_guidance_scale: Option<f32>,
    pub inpaint_strength: f32,
    pub ip_adapter_strength: Option<f32>,
    pub prior_steps: Option<u32>,
    pub inpaint_steps: u32,
    pub control_steps: Option<u32>,
    pub composite: CompositeParams,
    pub stage2_conditions: Vec<ConditionSource>,
}

/// One layer of optional overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLayer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpaint_guidance_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_guidance_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpaint_strength: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip_adapter_strength: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpaint_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_conditions: Option<Vec<ConditionSource>>,
}

impl EditLayer {
    fn overlay(&mut self, top: &EditLayer) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if top.$f.is_some() {
                    self.$f = top.$f.clone();
                }
            )*};
        }
        take!(
            inpaint_guidance_scale,
            control_guidance_scale,
            inpaint_strength,
            ip_adapter_strength,
            prior_steps,
            inpaint_steps,
            control_steps,
            dilation_px,
            alpha,
            stage2_conditions
        );
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryLayer {
    #[serde(flatten)]
    pub base: EditLayer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<EditLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<EditLayer>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayer {
    #[serde(flatten)]
    pub base: EditLayer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<CategoryLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<CategoryLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<CategoryLayer>,
}

impl DatasetLayer {
    fn category(&self, c: AttributeCategory) -> Option<&CategoryLayer> {
        match c {
            AttributeCategory::Background => self.background.as_ref(),
            AttributeCategory::Color => self.color.as_ref(),
            AttributeCategory::Texture => self.texture.as_ref(),
        }
    }

    pub fn category_mut(&mut self, c: AttributeCategory) -> &mut CategoryLayer {
        match c {
            AttributeCategory::Background => self.background.get_or_insert_with(Default::default),
            AttributeCategory::Color => self.color.get_or_insert_with(Default::default),
            AttributeCategory::Texture => self.texture.get_or_insert_with(Default::default),
        }
    }
}

/// Layered edit parameters: defaults ← dataset ← category ← feasibility.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLayers {
    #[serde(default)]
    pub defaults: EditLayer,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetLayer>,
}

impl EditLayers {
    /// The per-dataset settings for the Pets, Aircraft and Cars datasets.
    pub fn paper_presets() -> Self {
        toml::from_str(PRESETS).expect("bundled edit presets parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("edit layers serialize")
    }

    pub fn resolve(&self, dataset: &str, category: AttributeCategory, feasibility: Feasibility) -> Result<EditConfig> {
        let missing = || Error::MissingConfig { dataset: dataset.to_string(), category, feasibility };
        let ds = self.datasets.get(dataset).ok_or_else(missing)?;
        let cat = ds.category(category).ok_or_else(missing)?;
        let mut layer = self.defaults.clone();
        layer.overlay(&ds.base);
        layer.overlay(&cat.base);
        let feas = match feasibility {
            Feasibility::Feasible => &cat.feasible,
            Feasibility::Infeasible => &cat.infeasible,
        };
        if let Some(f) = feas {
            layer.overlay(f);
        }
        let need = |v: Option<f32>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("{dataset}/{category}/{feasibility}: `{name}` is not set")))
        };
        let composite = if category.edits_foreground() {
            CompositeParams::Alpha(need(layer.alpha, "alpha")?)
        } else {
            CompositeParams::DilationPx(
                layer
                    .dilation_px
                    .ok_or_else(|| Error::Config(format!("{dataset}/{category}/{feasibility}: `dilation_px` is not set")))?,
            )
        };
        let cfg = EditConfig {
            inpaint_guidance_scale: need(layer.inpaint_guidance_scale, "inpaint_guidance_scale")?,
            control_guidance_scale: layer.control_guidance_scale,
            inpaint_strength: need(layer.inpaint_strength, "inpaint_strength")?,
            ip_adapter_strength: layer.ip_adapter_strength,
            prior_steps: layer.prior_steps,
            inpaint_steps: layer
                .inpaint_steps
                .ok_or_else(|| Error::Config(format!("{dataset}/{category}/{feasibility}: `inpaint_steps` is not set")))?,
            control_steps: layer.control_steps,
            composite,
            stage2_conditions: layer
                .stage2_conditions
                .unwrap_or_else(|| vec![ConditionSource::Stage1, ConditionSource::RawPrior, ConditionSource::RealPrior]),
        };
        cfg.validate(category)
            .map_err(|e| Error::Config(format!("{dataset}/{category}/{feasibility}: {e}")))?;
        Ok(cfg)
    }

    /// Resolve every triple of a dataset up front so bad configs fail before any work.
    pub fn check_dataset(&self, dataset: &str) -> Result<()> {
        for c in AttributeCategory::ALL {
            for f in Feasibility::ALL {
                self.resolve(dataset, c, f)?;
            }
        }
        Ok(())
    }
}

impl EditConfig {
    pub fn validate(&self, category: AttributeCategory) -> std::result::Result<(), String> {
        let strength_ok = |s: f32| s > 0.0 && s <= 1.0;
        if self.inpaint_guidance_scale <= 0.0 {
            return Err("inpaint guidance scale must be > 0".into());
        }
        if !strength_ok(self.inpaint_strength) {
            return Err("inpaint strength must be in (0, 1]".into());
        }
        if self.inpaint_steps == 0 || self.prior_steps == Some(0) || self.control_steps == Some(0) {
            return Err("steps must be >= 1".into());
        }
        match self.composite {
            CompositeParams::Alpha(a) if !(0.0..=1.0).contains(&a) => return Err("alpha must be in [0, 1]".into()),
            _ => {}
        }
        if category != AttributeCategory::Color && self.prior_steps.is_none() {
            return Err("diffusion priors need prior_steps".into());
        }
        if category.edits_foreground() {
            match (self.control_guidance_scale, self.ip_adapter_strength, self.control_steps) {
                (Some(g), Some(s), Some(_)) if g > 0.0 && strength_ok(s) => {}
                _ => return Err("colour/texture edits need control guidance > 0, ip strength in (0, 1] and control steps".into()),
            }
            if self.stage2_conditions.is_empty() {
                return Err("stage-2 conditioning set is empty".into());
            }
        }
        Ok(())
    }
}

pub struct InpaintRequest<'a> {
    pub init_image: &'a RgbImage,
    /// 1 = editable.
    pub mask: &'a Mask,
    pub prompt: &'a str,
    pub strength: f32,
    pub guidance: f32,
    pub steps: u32,
    pub seed: u64,
}

pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> &str;
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<RgbImage>;
}

pub struct ControlRequest<'a> {
    pub prompt: &'a str,
    pub canny: &'a CannyMap,
    pub image_conditions: &'a [&'a RgbImage],
    pub condition_strength: f32,
    pub guidance: f32,
    pub steps: u32,
    pub seed: u64,
}

pub trait StructureControlBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, req: &ControlRequest<'_>) -> Result<RgbImage>;
}

fn check_output(out: &RgbImage, expected: (u32, u32), backend: &str) -> Result<()> {
    ensure_same(out.dimensions(), expected, &format!("{backend} output"))
}

/// Inpaint the background (the complement of the foreground mask) starting from the real prior.
#[allow(clippy::too_many_arguments)]
pub fn edit_background(
    real: &RgbImage,
    mask: &Mask,
    real_prior: &RgbImage,
    prompt_text: &str,
    cfg: &EditConfig,
    backend: &dyn InpaintBackend,
    seed: u64,
) -> Result<RgbImage> {
    ensure_same(real.dimensions(), mask.dimensions(), "background edit mask")?;
    ensure_same(real.dimensions(), real_prior.dimensions(), "background edit prior")?;
    let region = invert_mask(mask);
    let out = with_retry("background inpaint", seed, |s| {
        backend.inpaint(&InpaintRequest {
            init_image: real_prior,
            mask: &region,
            prompt: prompt_text,
            strength: cfg.inpaint_strength,
            guidance: cfg.inpaint_guidance_scale,
            steps: cfg.inpaint_steps,
            seed: s,
        })
    })?;
    check_output(&out, real.dimensions(), backend.name())?;
    Ok(out)
}

/// Two stages: inpaint the object from the real prior, then regenerate under canny control
/// conditioned on the configured set of images.
#[allow(clippy::too_many_arguments)]
pub fn edit_foreground(
    real: &RgbImage,
    mask: &Mask,
    canny: &CannyMap,
    raw_prior: &RgbImage,
    real_prior: &RgbImage,
    prompt_text: &str,
    cfg: &EditConfig,
    inpaint: &dyn InpaintBackend,
    control: &dyn StructureControlBackend,
    seed: u64,
) -> Result<RgbImage> {
    let dims = real.dimensions();
    ensure_same(dims, mask.dimensions(), "foreground edit mask")?;
    ensure_same(dims, canny.edges().dimensions(), "foreground edit canny")?;
    ensure_same(dims, real_prior.dimensions(), "foreground edit prior")?;
    let (Some(guidance), Some(strength), Some(steps)) = (cfg.control_guidance_scale, cfg.ip_adapter_strength, cfg.control_steps)
    else {
        return Err(Error::Config("foreground edit without control settings".into()));
    };

    let stage1 = with_retry("foreground inpaint", seed, |s| {
        inpaint.inpaint(&InpaintRequest {
            init_image: real_prior,
            mask,
            prompt: prompt_text,
            strength: cfg.inpaint_strength,
            guidance: cfg.inpaint_guidance_scale,
            steps: cfg.inpaint_steps,
            seed: s,
        })
    })?;
    check_output(&stage1, dims, inpaint.name())?;

    let raw = resize_rgb(raw_prior, dims.0, dims.1);
    let conditions: Vec<&RgbImage> = cfg
        .stage2_conditions
        .iter()
        .map(|c| match c {
            ConditionSource::Stage1 => &stage1,
            ConditionSource::RawPrior => &raw,
            ConditionSource::RealPrior => real_prior,
        })
        .collect();
    let out = with_retry("structure-controlled generation", seed, |s| {
        control.generate(&ControlRequest {
            prompt: prompt_text,
            canny,
            image_conditions: &conditions,
            condition_strength: strength,
            guidance,
            steps,
            seed: s,
        })
    })?;
    check_output(&out, dims, control.name())?;
    Ok(out)
}

/// Copy the protected region from `real`: the object for background edits, everything but the
/// object for colour and texture edits.
pub fn paste_invariant_regions(generated: &RgbImage, real: &RgbImage, mask: &Mask, category: AttributeCategory) -> Result<RgbImage> {
    ensure_same(generated.dimensions(), real.dimensions(), "paste-back")?;
    ensure_same(real.dimensions(), mask.dimensions(), "paste-back mask")?;
    let protect_inside = !category.edits_foreground();
    Ok(RgbImage::from_fn(real.width(), real.height(), |x, y| {
        if mask.get(x, y) == protect_inside {
            *real.get_pixel(x, y)
        } else {
            *generated.get_pixel(x, y)
        }
    }))
}

// ---------------------------------------------------------------------------------------------
// Job orchestration.

pub struct EditBackends<'a> {
    pub diffusion: &'a dyn DiffusionBackend,
    pub inpaint: &'a dyn InpaintBackend,
    pub control: &'a dyn StructureControlBackend,
}

/// Everything a job needs besides the job itself.
pub struct JobContext<'a> {
    pub manifest: &'a Manifest,
    /// Relative image paths in the manifest resolve against this directory.
    pub root: &'a Path,
    pub dataset: &'a str,
    pub layers: &'a EditLayers,
    pub bank: &'a ColorBank,
    pub backends: EditBackends<'a>,
    pub working_long_side: u32,
    pub pad_multiple: u32,
    pub canny_low: f32,
    pub canny_high: f32,
    pub prior_cache: Option<&'a Path>,
}

impl<'a> JobContext<'a> {
    pub fn new(manifest: &'a Manifest, root: &'a Path, layers: &'a EditLayers, bank: &'a ColorBank, backends: EditBackends<'a>) -> Self {
        JobContext {
            manifest,
            root,
            dataset: &manifest.dataset_id,
            layers,
            bank,
            backends,
            working_long_side: 1024,
            pad_multiple: 8,
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
            prior_cache: None,
        }
    }

    pub fn resolve_path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }
}

pub fn mask_path(real_image_id: &str) -> String {
    format!("maps/{real_image_id}.mask.png")
}

pub fn canny_path(real_image_id: &str) -> String {
    format!("maps/{real_image_id}.canny.png")
}

pub fn synthetic_path(job_id: &str) -> String {
    format!("synthetic/{job_id}.png")
}

fn cached_raw_prior(
    ctx: &JobContext<'_>,
    prompt: &PromptRecord,
    class: &ClassEntry,
    real_id: &str,
    seed: u64,
    steps: u32,
    (w, h): (u32, u32),
) -> Result<RawPrior> {
    let cache_file = ctx
        .prior_cache
        .map(|dir| dir.join(format!("{}.png", prior_cache_key(&prompt.prompt_id, real_id, seed))));
    if let Some(path) = &cache_file {
        if path.exists() {
            let image = load_rgb(path)?;
            if image.dimensions() == (w, h) {
                let source = if prompt.category == AttributeCategory::Color { PriorSource::ColorBank } else { PriorSource::Diffusion };
                return Ok(RawPrior { image, source, prompt_id: prompt.prompt_id.clone() });
            }
        }
    }
    let raw = make_raw_prior(prompt, class, ctx.backends.diffusion, ctx.bank, seed, steps, w, h)?;
    if let Some(path) = &cache_file {
        save_rgb(&raw.image, path)?;
    }
    Ok(raw)
}

/// Build (or reuse) the cached raw prior for a job at working resolution. Needs `prior_cache`.
pub fn prepare_prior(job: &GenerationJob, ctx: &JobContext<'_>) -> Result<PathBuf> {
    let dir = ctx
        .prior_cache
        .ok_or_else(|| Error::Config("no prior cache directory configured".into()))?;
    let m = ctx.manifest;
    let real_rec = m
        .image(&job.real_image_id)
        .ok_or_else(|| Error::Precondition(format!("real image {} not in manifest", job.real_image_id)))?;
    let prompt = m
        .prompt(&job.prompt_id)
        .ok_or_else(|| Error::Precondition(format!("prompt {} not in manifest", job.prompt_id)))?;
    let class = m
        .class(real_rec.class_id)
        .ok_or_else(|| Error::Precondition(format!("class {} not in manifest", real_rec.class_id)))?;
    let cfg = ctx.layers.resolve(ctx.dataset, prompt.category, prompt.feasibility)?;
    let (ow, oh) = image::image_dimensions(ctx.resolve_path(&real_rec.path))?;
    let (ww, wh) = working_size(ow, oh, ctx.working_long_side);
    let dims = (ww.div_ceil(ctx.pad_multiple) * ctx.pad_multiple, wh.div_ceil(ctx.pad_multiple) * ctx.pad_multiple);
    cached_raw_prior(ctx, prompt, class, &real_rec.image_id, job.seed, cfg.prior_steps.unwrap_or(1), dims)?;
    Ok(dir.join(format!("{}.png", prior_cache_key(&prompt.prompt_id, &real_rec.image_id, job.seed))))
}

/// Run maps → priors → edit → paste for one job and write the output image.
///
/// The edit happens at working resolution (long side `working_long_side`, reflect-padded to
/// `pad_multiple`); the result is resized back and the protected region is copied from the
/// original-resolution photo, so it is bit-identical to the source.
pub fn run_generation_job(job: &GenerationJob, ctx: &JobContext<'_>) -> Result<(ImageRecord, RgbImage)> {
    let m = ctx.manifest;
    let real_rec = m
        .image(&job.real_image_id)
        .filter(|r| r.kind == ImageKind::Real)
        .ok_or_else(|| Error::Precondition(format!("real image {} not in manifest", job.real_image_id)))?;
    let prompt = m
        .prompt(&job.prompt_id)
        .ok_or_else(|| Error::Precondition(format!("prompt {} not in manifest", job.prompt_id)))?;
    if !prompt.is_accepted() {
        return Err(Error::Precondition(format!("prompt {} is not accepted", prompt.prompt_id)));
    }
    let class = m
        .class(real_rec.class_id)
        .ok_or_else(|| Error::Precondition(format!("class {} not in manifest", real_rec.class_id)))?;
    let cfg = ctx.layers.resolve(ctx.dataset, prompt.category, prompt.feasibility)?;

    let real = load_rgb(ctx.resolve_path(&real_rec.path))?;
    let mask_file = ctx.resolve_path(&mask_path(&real_rec.image_id));
    if !mask_file.exists() {
        return Err(Error::Precondition(format!("no mask for {}; run the maps stage", real_rec.image_id)));
    }
    let mask = load_mask(&mask_file)?;
    ensure_same(real.dimensions(), mask.dimensions(), "stored mask")?;
    let (ow, oh) = real.dimensions();

    let (ww, wh) = working_size(ow, oh, ctx.working_long_side);
    let work_real = reflect_pad(&resize_rgb(&real, ww, wh), ctx.pad_multiple);
    let work_mask = reflect_pad_mask(&mask.resize_nearest(ww, wh), ctx.pad_multiple);
    let dims = work_real.dimensions();

    let steps = cfg.prior_steps.unwrap_or(1);
    let raw = cached_raw_prior(ctx, prompt, class, &real_rec.image_id, job.seed, steps, dims)?;
    let real_prior = compose_real_prior(prompt.category, &work_real, &work_mask, &raw, cfg.composite, &real_rec.image_id)?;
    let text = render_prompt(prompt, class);

    let edited = if prompt.category.edits_foreground() {
        let canny = canny_from_foreground(&work_real, &work_mask, ctx.canny_low, ctx.canny_high)?;
        edit_foreground(
            &work_real,
            &work_mask,
            &canny,
            &raw.image,
            &real_prior.image,
            &text,
            &cfg,
            ctx.backends.inpaint,
            ctx.backends.control,
            job.seed,
        )?
    } else {
        edit_background(&work_real, &work_mask, &real_prior.image, &text, &cfg, ctx.backends.inpaint, job.seed)?
    };

    let restored = resize_rgb(&crop(&edited, ww, wh), ow, oh);
    let out = paste_invariant_regions(&restored, &real, &mask, prompt.category)?;

    let rel = synthetic_path(&job.job_id);
    save_rgb(&out, ctx.resolve_path(&rel))?;
    let record = ImageRecord {
        image_id: job.job_id.clone(),
        class_id: real_rec.class_id,
        path: rel,
        split: real_rec.split,
        kind: ImageKind::Synthetic,
        parent_real_id: Some(real_rec.image_id.clone()),
        prompt_id: Some(prompt.prompt_id.clone()),
        filter_status: FilterStatus::Unfiltered,
        seed: job.seed,
        attempt: Some(job.attempt),
        verdict: None,
    };
    Ok((record, out))
}

// ---------------------------------------------------------------------------------------------
// Deterministic backends.

/// Returns the init image untouched.
pub struct EchoInpaint;

impl InpaintBackend for EchoInpaint {
    fn name(&self) -> &str {
        "echo-inpaint"
    }

    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<RgbImage> {
        Ok(req.init_image.clone())
    }
}

fn prompt_tint(prompt: &str, seed: u64) -> [u8; 3] {
    let h = text_seed(prompt, seed).to_le_bytes();
    [h[0], h[1], h[2]]
}

/// Pulls editable pixels toward a colour derived from (prompt, seed) by `strength / 2`, with a
/// faint seeded texture. Pixels outside the mask are returned unchanged.
pub struct BlendInpaint;

impl InpaintBackend for BlendInpaint {
    fn name(&self) -> &str {
        "blend-inpaint"
    }

    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<RgbImage> {
        ensure_same(req.init_image.dimensions(), req.mask.dimensions(), "inpaint mask")?;
        let tint = prompt_tint(req.prompt, req.seed);
        let t = (req.strength as f64 / 2.0).clamp(0.0, 1.0);
        let salt = text_seed("texture", req.seed);
        Ok(RgbImage::from_fn(req.init_image.width(), req.init_image.height(), |x, y| {
            let p = *req.init_image.get_pixel(x, y);
            if !req.mask.get(x, y) {
                return p;
            }
            let grain = ((x as u64).wrapping_mul(31) ^ (y as u64).wrapping_mul(17) ^ salt) % 9;
            Rgb(std::array::from_fn(|c| {
                let v = (1.0 - t) * p[c] as f64 + t * tint[c] as f64 + grain as f64 - 4.0;
                v.round().clamp(0.0, 255.0) as u8
            }))
        }))
    }
}

/// Blends the first condition with the mean of the others at `condition_strength`, then
/// darkens canny edge pixels.
pub struct CompositeControl;

impl StructureControlBackend for CompositeControl {
    fn name(&self) -> &str {
        "composite-control"
    }

    fn generate(&self, req: &ControlRequest<'_>) -> Result<RgbImage> {
        let edges = req.canny.edges();
        let (w, h) = edges.dimensions();
        let Some((first, rest)) = req.image_conditions.split_first() else {
            return Err(Error::Precondition("no image conditions".into()));
        };
        for c in req.image_conditions {
            ensure_same(c.dimensions(), (w, h), "control condition")?;
        }
        let s = req.condition_strength as f64;
        Ok(RgbImage::from_fn(w, h, |x, y| {
            let base = first.get_pixel(x, y);
            Rgb(std::array::from_fn(|c| {
                let mut v = base[c] as f64;
                if !rest.is_empty() {
                    let mean = rest.iter().map(|r| r.get_pixel(x, y)[c] as f64).sum::<f64>() / rest.len() as f64;
                    v = (1.0 - s) * v + s * mean;
                }
                if edges.get(x, y) {
                    v *= 0.75;
                }
                v.round().clamp(0.0, 255.0) as u8
            }))
        }))
    }
}

pub type CallLog = Arc<Mutex<Vec<String>>>;

/// Wraps a backend and logs `"<name>:<seed>"` per call.
pub struct Recording<B> {
    pub inner: B,
    pub log: CallLog,
}

impl<B> Recording<B> {
    pub fn new(inner: B, log: CallLog) -> Self {
        Recording { inner, log }
    }

    fn note(&self, what: &str, seed: u64) {
        self.log.lock().expect("call log lock").push(format!("{what}:{seed}"));
    }
}

impl<B: InpaintBackend> InpaintBackend for Recording<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<RgbImage> {
        self.note("inpaint", req.seed);
        self.inner.inpaint(req)
    }
}

impl<B: StructureControlBackend> StructureControlBackend for Recording<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn generate(&self, req: &ControlRequest<'_>) -> Result<RgbImage> {
        self.note("control", req.seed);
        self.inner.generate(req)
    }
}
