//! Stage orchestration: prompts → maps → priors → generate → filter, resumable over a manifest.
//!
//! Every stage reads the manifest, skips work whose output already exists, appends new records
//! through the single manifest writer, and marks itself complete only when nothing failed.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edit::{
    canny_path, mask_path, prepare_prior, run_generation_job, synthetic_path, BlendInpaint, CompositeControl, EchoInpaint,
    EditBackends, EditLayers, InpaintBackend, JobContext, StructureControlBackend,
};
use crate::error::{Error, Result};
use crate::filter::{filter_image, BankVqa, FailingVqa, QuestionTemplates, VqaBackend, DEFAULT_MAX_ATTEMPTS};
use crate::manifest::{load_manifest, save_manifest, ManifestWriter, Record};
use crate::maps::{
    canny_from_foreground, foreground_mask, ContrastDetector, ContrastMatting, ContrastSegmenter, DetectorBackend,
    MattingBackend, SegmenterBackend, CANNY_HIGH, CANNY_LOW,
};
use crate::model::{
    pair_real_with_prompts, AttributeCategory, ClassEntry, Feasibility, FilterStatus, GenerationJob, ImageKind, ImageRecord,
    JobFailure, Manifest, PromptStatus, Split, Stage,
};
use crate::priors::{ColorBank, DiffusionBackend, ProceduralDiffusion};
use crate::prompts::llm::{LlmBackend, OfflineLlm, SyntheticLlm};
use crate::prompts::template::IclTemplate;
use crate::prompts::{apply_manual_filter, generate_attributes, self_filter, Decisions};
use crate::raster::{load_rgb, save_mask, save_rgb};
use crate::train::encoder::{EncoderBackend, ToyEncoder};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: String,
    pub prior_cache: String,
    /// Layered edit settings; the bundled presets when absent.
    pub edit_presets: Option<String>,
    /// Manual prompt decisions (`accept <keyword>` lines); see [`PromptsConfig::auto_accept`].
    pub decisions: Option<String>,
    pub color_bank: Option<String>,
    pub icl_template: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: "manifest.jsonl".into(),
            prior_cache: "priors".into(),
            edit_presets: None,
            decisions: None,
            color_bank: None,
            icl_template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub llm: String,
    pub diffusion: String,
    pub inpaint: String,
    pub control: String,
    pub detector: String,
    pub segmenter: String,
    pub matting: String,
    pub vqa: String,
    pub encoder: String,
    /// For the bank VQA: answer wrongly about one in `n` questions.
    pub vqa_flip_one_in: Option<u64>,
    /// For the synthetic LLM: drop every n-th entry when asked to review a list.
    pub llm_drop_every: Option<usize>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            llm: "synthetic".into(),
            diffusion: "procedural".into(),
            inpaint: "blend".into(),
            control: "composite".into(),
            detector: "contrast".into(),
            segmenter: "contrast".into(),
            matting: "contrast".into(),
            vqa: "bank".into(),
            encoder: "toy".into(),
            vqa_flip_one_in: None,
            llm_drop_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsConfig {
    /// Attributes requested per (class, category, feasibility).
    pub per_group: usize,
    /// Accept every self-filtered prompt when no decisions file is given.
    pub auto_accept: bool,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        PromptsConfig { per_group: 10, auto_accept: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub categories: Vec<AttributeCategory>,
    /// Accepted prompts used per real image and feasibility.
    pub k: usize,
    pub working_long_side: u32,
    pub pad_multiple: u32,
    pub canny_low: f32,
    pub canny_high: f32,
    pub max_attempts: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            categories: AttributeCategory::ALL.to_vec(),
            k: 2,
            working_long_side: 1024,
            pad_multiple: 8,
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    /// Items sampled per (category, feasibility).
    pub per_cell: usize,
    pub seed: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig { per_cell: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_id: String,
    pub seed: u64,
    /// Concurrent jobs per stage.
    pub parallelism: usize,
    pub paths: PathsConfig,
    pub backends: BackendConfig,
    pub prompts: PromptsConfig,
    pub generation: GenerationConfig,
    pub train: TrainConfig,
    pub annotation: AnnotationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset_id: "pets".into(),
            seed: 0,
            parallelism: 4,
            paths: PathsConfig::default(),
            backends: BackendConfig::default(),
            prompts: PromptsConfig::default(),
            generation: GenerationConfig::default(),
            train: TrainConfig::default(),
            annotation: AnnotationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// sha256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.parallelism == 0 {
            return bad("parallelism must be >= 1".into());
        }
        if self.prompts.per_group == 0 {
            return bad("prompts.per_group must be >= 1".into());
        }
        if self.generation.categories.is_empty() {
            return bad("generation.categories is empty".into());
        }
        if self.generation.k == 0 {
            return bad("generation.k must be >= 1".into());
        }
        if self.generation.max_attempts == 0 {
            return bad("generation.max_attempts must be >= 1".into());
        }
        if self.generation.pad_multiple == 0 || self.generation.working_long_side == 0 {
            return bad("generation.pad_multiple and working_long_side must be >= 1".into());
        }
        if self.paths.decisions.is_none() && !self.prompts.auto_accept {
            return bad("set paths.decisions or prompts.auto_accept".into());
        }
        self.train.validate()
    }
}

/// Concrete backends chosen by name.
pub struct Backends {
    pub llm: Box<dyn LlmBackend>,
    pub diffusion: Box<dyn DiffusionBackend>,
    pub inpaint: Box<dyn InpaintBackend>,
    pub control: Box<dyn StructureControlBackend>,
    pub detector: Box<dyn DetectorBackend>,
    pub segmenter: Box<dyn SegmenterBackend>,
    pub matting: Box<dyn MattingBackend>,
    pub encoder: Box<dyn EncoderBackend>,
    vqa: String,
    vqa_flip_one_in: Option<u64>,
}

fn unknown(kind: &str, name: &str) -> Error {
    Error::Config(format!("unknown {kind} backend `{name}`"))
}

impl Backends {
    pub fn from_config(c: &BackendConfig) -> Result<Self> {
        let llm: Box<dyn LlmBackend> = match c.llm.as_str() {
            "synthetic" => Box::new(SyntheticLlm { drop_every: c.llm_drop_every }),
            "offline" => Box::new(OfflineLlm),
            other => return Err(unknown("llm", other)),
        };
        let diffusion: Box<dyn DiffusionBackend> = match c.diffusion.as_str() {
            "procedural" => Box::new(ProceduralDiffusion),
            other => return Err(unknown("diffusion", other)),
        };
        let inpaint: Box<dyn InpaintBackend> = match c.inpaint.as_str() {
            "blend" => Box::new(BlendInpaint),
            "echo" => Box::new(EchoInpaint),
            other => return Err(unknown("inpaint", other)),
        };
        let control: Box<dyn StructureControlBackend> = match c.control.as_str() {
            "composite" => Box::new(CompositeControl),
            other => return Err(unknown("control", other)),
        };
        let detector: Box<dyn DetectorBackend> = match c.detector.as_str() {
            "contrast" => Box::new(ContrastDetector),
            other => return Err(unknown("detector", other)),
        };
        let segmenter: Box<dyn SegmenterBackend> = match c.segmenter.as_str() {
            "contrast" => Box::new(ContrastSegmenter),
            other => return Err(unknown("segmenter", other)),
        };
        let matting: Box<dyn MattingBackend> = match c.matting.as_str() {
            "contrast" => Box::new(ContrastMatting),
            other => return Err(unknown("matting", other)),
        };
        let encoder: Box<dyn EncoderBackend> = match c.encoder.as_str() {
            "toy" => Box::new(ToyEncoder::default()),
            other => return Err(unknown("encoder", other)),
        };
        if !matches!(c.vqa.as_str(), "bank" | "failing") {
            return Err(unknown("vqa", &c.vqa));
        }
        Ok(Backends {
            llm,
            diffusion,
            inpaint,
            control,
            detector,
            segmenter,
            matting,
            encoder,
            vqa: c.vqa.clone(),
            vqa_flip_one_in: c.vqa_flip_one_in,
        })
    }

    /// The bank VQA needs the manifest's infeasible keywords, so it is built per run.
    pub fn vqa_for(&self, manifest: &Manifest) -> Box<dyn VqaBackend> {
        match self.vqa.as_str() {
            "failing" => Box::new(FailingVqa),
            _ => Box::new(BankVqa::new(
                manifest
                    .prompts
                    .iter()
                    .filter(|p| p.feasibility == Feasibility::Infeasible)
                    .map(|p| p.keyword.as_str()),
                self.vqa_flip_one_in,
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    /// Units of work performed in this run.
    pub done: usize,
    /// Units skipped because their output already existed.
    pub skipped: usize,
    pub failures: Vec<JobFailure>,
}

impl StageReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub root: PathBuf,
    pub backends: Backends,
    layers: EditLayers,
    bank: ColorBank,
    template: IclTemplate,
    questions: QuestionTemplates,
}

impl Pipeline {
    /// Resolve every backend and auxiliary file up front so configuration errors surface
    /// before any work starts.
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let root = root.into();
        let backends = Backends::from_config(&config.backends)?;
        let read = |p: &str| {
            let path = root.join(p);
            std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let layers = match &config.paths.edit_presets {
            Some(p) => EditLayers::parse(&read(p)?)?,
            None => EditLayers::paper_presets(),
        };
        layers.check_dataset(&config.dataset_id)?;
        let bank = match &config.paths.color_bank {
            Some(p) => ColorBank::parse(&read(p)?)?,
            None => ColorBank::standard(),
        };
        let template = match &config.paths.icl_template {
            Some(p) => IclTemplate::parse(&read(p)?)?,
            None => IclTemplate::default(),
        };
        if let Some(p) = &config.paths.decisions {
            Decisions::parse(&read(p)?)?;
        }
        Ok(Pipeline { config, root, backends, layers, bank, template, questions: QuestionTemplates::default() })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(&self.config.paths.manifest)
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        load_manifest(self.manifest_path())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        let mut manifest = self.load_manifest()?;
        if manifest.dataset_id != self.config.dataset_id {
            return Err(Error::Config(format!(
                "config is for dataset `{}`, manifest is `{}`",
                self.config.dataset_id, manifest.dataset_id
            )));
        }
        manifest.require_stage(stage)?;
        let writer = ManifestWriter::open(self.manifest_path())?;
        let mut w = Committer { manifest: &mut manifest, writer: &writer };
        let hash = self.config.hash()?;
        if w.manifest.pipeline_config_hash != hash {
            if !w.manifest.pipeline_config_hash.is_empty() {
                log::warn!("pipeline config changed since the manifest was last written");
            }
            w.commit(Record::ConfigHash { pipeline_config_hash: hash })?;
        }
        let mut report = match stage {
            Stage::Prompts => self.prompts_stage(&mut w)?,
            Stage::Maps => self.maps_stage(&mut w)?,
            Stage::Priors => self.priors_stage(&mut w)?,
            Stage::Generate => self.generate_stage(&mut w)?,
            Stage::Filter => self.filter_stage(&mut w)?,
        };
        report.stage = Some(stage);
        if report.ok() && !w.manifest.stages.contains(&stage) {
            w.commit(Record::Stage { stage })?;
        }
        writer.finish()?;
        Ok(report)
    }

    /// Run every stage in order, stopping at the first one with failures.
    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        let mut out = Vec::new();
        for stage in [Stage::Prompts, Stage::Maps, Stage::Priors, Stage::Generate, Stage::Filter] {
            let r = self.run_stage(stage)?;
            let ok = r.ok();
            out.push(r);
            if !ok {
                break;
            }
        }
        Ok(out)
    }

    fn decisions(&self) -> Result<Option<Decisions>> {
        match &self.config.paths.decisions {
            Some(p) => {
                let path = self.root.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
                Ok(Some(Decisions::parse(&text)?))
            }
            None => Ok(None),
        }
    }

    fn prompts_stage(&self, w: &mut Committer<'_>) -> Result<StageReport> {
        let mut report = StageReport::default();
        let decisions = self.decisions()?;
        let mut classes = w.manifest.classes.clone();
        classes.sort_by_key(|c| c.class_id);
        let llm = self.backends.llm.as_ref();
        for class in &classes {
            for &category in &self.config.generation.categories {
                for feasibility in Feasibility::ALL {
                    let present = w
                        .manifest
                        .prompts
                        .iter()
                        .any(|p| p.class_id == class.class_id && p.category == category && p.feasibility == feasibility);
                    if present {
                        report.skipped += 1;
                        continue;
                    }
                    let raw = generate_attributes(class, category, feasibility, self.config.prompts.per_group, llm, &self.template)?;
                    let filtered = self_filter(&raw, class, llm, &self.template)?;
                    let manual = match &decisions {
                        Some(d) => apply_manual_filter(&filtered, d)?,
                        None => apply_manual_filter(&filtered, &Decisions::all(filtered.iter().map(|p| p.keyword.as_str()), true))?,
                    };
                    for mut rec in raw {
                        if let Some(m) = manual.iter().find(|m| m.prompt_id == rec.prompt_id) {
                            rec.status = m.status;
                        } else if filtered.iter().any(|f| f.prompt_id == rec.prompt_id) {
                            rec.status = PromptStatus::SelfFiltered;
                        }
                        w.commit(Record::Prompt(rec))?;
                    }
                    report.done += 1;
                }
            }
        }
        Ok(report)
    }

    fn train_reals(&self, m: &Manifest) -> Vec<ImageRecord> {
        m.real_images(Split::Train).cloned().collect()
    }

    fn maps_stage(&self, w: &mut Committer<'_>) -> Result<StageReport> {
        let mut report = StageReport::default();
        let todo: Vec<ImageRecord> = self
            .train_reals(w.manifest)
            .into_iter()
            .filter(|r| {
                let have = self.root.join(mask_path(&r.image_id)).exists() && self.root.join(canny_path(&r.image_id)).exists();
                report.skipped += have as usize;
                !have
            })
            .collect();
        let m = &*w.manifest;
        let results = self.run_parallel(&todo, |rec| {
            let class = m.class(rec.class_id).ok_or_else(|| Error::Schema(format!("class {} missing", rec.class_id)))?;
            let img = load_rgb(self.root.join(&rec.path))?;
            let b = &self.backends;
            let mask = foreground_mask(&rec.image_id, &img, &class.name, b.detector.as_ref(), b.segmenter.as_ref(), b.matting.as_ref())?;
            let g = &self.config.generation;
            let canny = canny_from_foreground(&img, &mask, g.canny_low, g.canny_high)?;
            save_mask(&mask, self.root.join(mask_path(&rec.image_id)))?;
            save_mask(canny.edges(), self.root.join(canny_path(&rec.image_id)))?;
            Ok(())
        });
        for (rec, r) in todo.iter().zip(results) {
            match r {
                Ok(()) => report.done += 1,
                Err(e) => report.failures.push(JobFailure {
                    job_id: format!("maps__{}", rec.image_id),
                    real_image_id: rec.image_id.clone(),
                    prompt_id: String::new(),
                    attempt: 0,
                    message: e.to_string(),
                }),
            }
        }
        Ok(report)
    }

    /// Every first-attempt job implied by the manifest and config, in a fixed order.
    pub fn jobs(&self, m: &Manifest) -> Result<Vec<GenerationJob>> {
        let reals = self.train_reals(m);
        let mut jobs = Vec::new();
        for &category in &self.config.generation.categories {
            jobs.extend(pair_real_with_prompts(&reals, &m.prompts, category, self.config.generation.k)?);
        }
        Ok(jobs)
    }

    fn job_context<'a>(&'a self, m: &'a Manifest) -> JobContext<'a> {
        let backends = EditBackends {
            diffusion: self.backends.diffusion.as_ref(),
            inpaint: self.backends.inpaint.as_ref(),
            control: self.backends.control.as_ref(),
        };
        let mut ctx = JobContext::new(m, &self.root, &self.layers, &self.bank, backends);
        let g = &self.config.generation;
        ctx.working_long_side = g.working_long_side;
        ctx.pad_multiple = g.pad_multiple;
        ctx.canny_low = g.canny_low;
        ctx.canny_high = g.canny_high;
        ctx
    }

    fn prior_cache_dir(&self) -> PathBuf {
        self.root.join(&self.config.paths.prior_cache)
    }

    fn priors_stage(&self, w: &mut Committer<'_>) -> Result<StageReport> {
        let mut report = StageReport::default();
        let jobs = self.jobs(w.manifest)?;
        let cache = self.prior_cache_dir();
        let mut ctx = self.job_context(w.manifest);
        ctx.prior_cache = Some(&cache);
        let results = self.run_parallel(&jobs, |job| prepare_prior(job, &ctx));
        for (job, r) in jobs.iter().zip(results) {
            match r {
                Ok(_) => report.done += 1,
                Err(e) => report.failures.push(failure(job, &e)),
            }
        }
        Ok(report)
    }

    fn generate_stage(&self, w: &mut Committer<'_>) -> Result<StageReport> {
        let mut report = StageReport::default();
        let existing: HashSet<(String, String)> = w
            .manifest
            .images
            .iter()
            .filter(|i| i.kind == ImageKind::Synthetic)
            .filter_map(|i| Some((i.parent_real_id.clone()?, i.prompt_id.clone()?)))
            .collect();
        let (todo, done): (Vec<GenerationJob>, Vec<GenerationJob>) = self
            .jobs(w.manifest)?
            .into_iter()
            .partition(|j| !existing.contains(&(j.real_image_id.clone(), j.prompt_id.clone())));
        report.skipped = done.len();
        let cache = self.prior_cache_dir();
        let snapshot = w.manifest.clone();
        let mut ctx = self.job_context(&snapshot);
        ctx.prior_cache = Some(&cache);
        for chunk in todo.chunks(self.chunk_size()) {
            let results = self.run_parallel(chunk, |job| run_generation_job(job, &ctx).map(|(rec, _)| rec));
            for (job, r) in chunk.iter().zip(results) {
                match r {
                    Ok(rec) => {
                        w.commit(Record::Image(rec))?;
                        report.done += 1;
                    }
                    Err(e) => {
                        log::error!("job {} failed: {e}", job.job_id);
                        let f = failure(job, &e);
                        w.commit(Record::Failure(f.clone()))?;
                        report.failures.push(f);
                    }
                }
            }
        }
        Ok(report)
    }

    fn filter_stage(&self, w: &mut Committer<'_>) -> Result<StageReport> {
        let mut report = StageReport::default();
        let todo: Vec<ImageRecord> = w
            .manifest
            .images
            .iter()
            .filter(|i| i.kind == ImageKind::Synthetic && i.filter_status == FilterStatus::Unfiltered)
            .cloned()
            .collect();
        report.skipped = w.manifest.images.iter().filter(|i| i.kind == ImageKind::Synthetic).count() - todo.len();
        let snapshot = w.manifest.clone();
        let vqa = self.backends.vqa_for(&snapshot);
        let cache = self.prior_cache_dir();
        let mut ctx = self.job_context(&snapshot);
        ctx.prior_cache = Some(&cache);
        let max = self.config.generation.max_attempts;
        for chunk in todo.chunks(self.chunk_size()) {
            let results = self.run_parallel(chunk, |rec| self.filter_one(rec, &snapshot, &ctx, vqa.as_ref(), max));
            for (rec, r) in chunk.iter().zip(results) {
                match r {
                    Ok(records) => {
                        for out in records {
                            w.commit(Record::Image(out))?;
                        }
                        report.done += 1;
                    }
                    Err(e) => {
                        let f = JobFailure {
                            job_id: rec.image_id.clone(),
                            real_image_id: rec.parent_real_id.clone().unwrap_or_default(),
                            prompt_id: rec.prompt_id.clone().unwrap_or_default(),
                            attempt: rec.attempt.unwrap_or(1),
                            message: e.to_string(),
                        };
                        w.commit(Record::Failure(f.clone()))?;
                        report.failures.push(f);
                    }
                }
            }
        }
        Ok(report)
    }

    /// Judge one image; regenerate with the next attempt while rejected and attempts remain.
    /// Returns every record touched, in attempt order.
    fn filter_one(&self, rec: &ImageRecord, m: &Manifest, ctx: &JobContext<'_>, vqa: &dyn VqaBackend, max: u32) -> Result<Vec<ImageRecord>> {
        let prompt_id = rec.prompt_id.as_deref().ok_or_else(|| Error::Schema(format!("{} has no prompt", rec.image_id)))?;
        let real_id = rec.parent_real_id.as_deref().ok_or_else(|| Error::Schema(format!("{} has no parent", rec.image_id)))?;
        let prompt = m.prompt(prompt_id).ok_or_else(|| Error::Schema(format!("prompt {prompt_id} missing")))?;
        let class = m.class(rec.class_id).ok_or_else(|| Error::Schema(format!("class {} missing", rec.class_id)))?;
        let questions = self.questions.build(prompt.category, &class.name, &prompt.keyword, prompt.feasibility);

        let mut job = GenerationJob::new(real_id, prompt, rec.attempt.unwrap_or(1));
        let mut current = rec.clone();
        let mut image = load_rgb(self.root.join(&rec.path))?;
        let mut out = Vec::new();
        loop {
            let verdict = filter_image(&current.image_id, &image, &questions, vqa)?;
            current.filter_status = verdict.status();
            current.attempt = Some(job.attempt);
            current.verdict = Some(verdict);
            let accepted = current.filter_status == FilterStatus::Accepted;
            out.push(current);
            if accepted || job.attempt >= max {
                return Ok(out);
            }
            job = job.next_attempt();
            let (next, img) = match m.image(&job.job_id) {
                Some(existing) => (existing.clone(), load_rgb(self.root.join(&existing.path))?),
                None => run_generation_job(&job, ctx)?,
            };
            current = next;
            image = img;
        }
    }

    fn chunk_size(&self) -> usize {
        self.config.parallelism * 4
    }

    /// Map `f` over `items` with at most `parallelism` workers; results keep input order.
    fn run_parallel<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Vec<Result<R>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            if self.config.parallelism > 1 {
                if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(self.config.parallelism).build() {
                    return pool.install(|| items.par_iter().map(&f).collect());
                }
            }
        }
        items.iter().map(f).collect()
    }
}

fn failure(job: &GenerationJob, e: &Error) -> JobFailure {
    JobFailure {
        job_id: job.job_id.clone(),
        real_image_id: job.real_image_id.clone(),
        prompt_id: job.prompt_id.clone(),
        attempt: job.attempt,
        message: e.to_string(),
    }
}

/// Applies records to the in-memory manifest and appends them to the file.
struct Committer<'a> {
    manifest: &'a mut Manifest,
    writer: &'a ManifestWriter,
}

impl Committer<'_> {
    fn commit(&mut self, record: Record) -> Result<()> {
        self.writer.append(record.clone())?;
        record.apply(self.manifest);
        Ok(())
    }
}

/// A small dataset of flat-background photos with one class-coloured blob each, plus a
/// manifest listing it. Useful for trying the pipeline without real data.
#[allow(clippy::too_many_arguments)]
pub fn write_toy_dataset(
    root: &Path,
    manifest_rel: &str,
    dataset_id: &str,
    class_names: &[&str],
    train_per_class: usize,
    test_per_class: usize,
    size: u32,
    seed: u64,
) -> Result<Manifest> {
    const OBJECT: [[u8; 3]; 6] = [[200, 60, 40], [40, 80, 200], [60, 170, 60], [200, 180, 40], [150, 60, 170], [40, 170, 170]];
    let mut m = Manifest::new(dataset_id);
    m.created_at = "toy".into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    for (ci, name) in class_names.iter().enumerate() {
        m.classes.push(ClassEntry { class_id: ci as u32, name: name.to_string(), dataset_id: dataset_id.into() });
        let obj = OBJECT[ci % OBJECT.len()];
        for i in 0..train_per_class + test_per_class {
            let split = if i < train_per_class { Split::Train } else { Split::Test };
            let id = format!("c{ci:02}-r{i:03}");
            used.insert(id.clone());
            let bg = [rng.gen_range(210..=240u8), rng.gen_range(210..=240u8), rng.gen_range(210..=240u8)];
            let (cx, cy) = (rng.gen_range(0.4..0.6) * size as f64, rng.gen_range(0.4..0.6) * size as f64);
            let (rx, ry) = (rng.gen_range(0.18..0.28) * size as f64, rng.gen_range(0.18..0.28) * size as f64);
            let noise_seed: u64 = rng.gen();
            let mut n = ChaCha8Rng::seed_from_u64(noise_seed);
            let img = RgbImage::from_fn(size, size, |x, y| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let base = if dx * dx + dy * dy <= 1.0 { obj } else { bg };
                Rgb(std::array::from_fn(|c| (base[c] as i32 + n.gen_range(-8..=8)).clamp(0, 255) as u8))
            });
            let rel = format!("real/{id}.png");
            save_rgb(&img, root.join(&rel))?;
            m.images.push(ImageRecord::real(id, ci as u32, rel, split));
        }
    }
    save_manifest(&m, root.join(manifest_rel))?;
    Ok(m)
}

/// Synthetic output paths of a manifest; all exist after a successful generate stage.
pub fn synthetic_outputs(m: &Manifest) -> Vec<String> {
    m.images
        .iter()
        .filter(|i| i.kind == ImageKind::Synthetic)
        .map(|i| synthetic_path(&i.image_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(k: usize, categories: Vec<AttributeCategory>) -> (tempfile::TempDir, Pipeline) {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), "manifest.jsonl", "pets", &["Abyssinian", "Bengal"], 3, 1, 40, 1).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.prompts.auto_accept = true;
        cfg.prompts.per_group = 4;
        cfg.generation.k = k;
        cfg.generation.categories = categories;
        cfg.generation.working_long_side = 32;
        cfg.parallelism = 2;
        let p = Pipeline::new(cfg, dir.path()).unwrap();
        (dir, p)
    }

    #[test]
    fn config_round_trip_and_hash() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let partial = PipelineConfig::parse("dataset_id = \"cars\"\n[generation]\nk = 3\n").unwrap();
        assert_eq!((partial.dataset_id.as_str(), partial.generation.k), ("cars", 3));
        assert!(PipelineConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn bad_backend_fails_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.prompts.auto_accept = true;
        cfg.backends.inpaint = "sdxl".into();
        assert!(matches!(Pipeline::new(cfg, dir.path()), Err(Error::Config(_))));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn stage_order_is_enforced() {
        let (_d, p) = setup(1, vec![AttributeCategory::Color]);
        assert!(matches!(p.run_stage(Stage::Generate), Err(Error::StageOrder { .. })));
        assert!(matches!(p.run_stage(Stage::Maps), Err(Error::StageOrder { .. })));
    }

    #[test]
    fn full_run_and_rerun() {
        let (dir, p) = setup(2, vec![AttributeCategory::Background]);
        let reports = p.run_all().unwrap();
        assert!(reports.iter().all(StageReport::ok), "{reports:?}");
        let m = p.load_manifest().unwrap();
        assert_eq!(m.stages.len(), 5);
        let firsts: Vec<&ImageRecord> = m.images.iter().filter(|i| i.kind == ImageKind::Synthetic && i.attempt == Some(1)).collect();
        assert_eq!(firsts.len(), 6 * 2 * 2);
        for i in m.images.iter().filter(|i| i.kind == ImageKind::Synthetic) {
            assert!(i.parent_real_id.is_some() && i.prompt_id.is_some() && i.verdict.is_some());
            assert_ne!(i.filter_status, FilterStatus::Unfiltered);
            assert!(dir.path().join(&i.path).exists());
        }
        let before = std::fs::read_to_string(p.manifest_path()).unwrap();
        for stage in [Stage::Prompts, Stage::Maps, Stage::Generate, Stage::Filter] {
            let r = p.run_stage(stage).unwrap();
            assert_eq!(r.done, 0, "{stage:?}");
        }
        assert_eq!(std::fs::read_to_string(p.manifest_path()).unwrap(), before);
    }
}
