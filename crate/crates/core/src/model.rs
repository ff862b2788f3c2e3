//! Domain records shared by every pipeline stage, and real-image/prompt job pairing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::FilterVerdict;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: u32,
    pub name: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeCategory {
    Background,
    Color,
    Texture,
}

impl AttributeCategory {
    pub const ALL: [AttributeCategory; 3] = [Self::Background, Self::Color, Self::Texture];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Color => "color",
            Self::Texture => "texture",
        }
    }

    /// Color and texture edits change the object; background edits change its surroundings.
    pub fn edits_foreground(self) -> bool {
        !matches!(self, Self::Background)
    }
}

impl fmt::Display for AttributeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "background" | "bg" | "back" => Ok(Self::Background),
            "color" | "colour" => Ok(Self::Color),
            "texture" | "tex" => Ok(Self::Texture),
            other => Err(Error::Config(format!("unknown attribute category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

impl Feasibility {
    pub const ALL: [Feasibility; 2] = [Self::Feasible, Self::Infeasible];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Feasible => "feasible",
            Self::Infeasible => "infeasible",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::Feasible => "F",
            Self::Infeasible => "IF",
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, Self::Feasible)
    }
}

impl fmt::Display for Feasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Feasibility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "feasible" | "f" => Ok(Self::Feasible),
            "infeasible" | "if" | "unfeasible" => Ok(Self::Infeasible),
            other => Err(Error::Config(format!("unknown feasibility `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStatus {
    Raw,
    SelfFiltered,
    ManualAccepted,
    ManualRejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub class_id: u32,
    pub category: AttributeCategory,
    pub feasibility: Feasibility,
    pub keyword: String,
    #[serde(default)]
    pub description: String,
    pub status: PromptStatus,
}

impl PromptRecord {
    pub fn is_accepted(&self) -> bool {
        self.status == PromptStatus::ManualAccepted
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.keyword.trim().is_empty() {
            return Err(Error::Schema(format!("prompt {} has an empty keyword", self.prompt_id)));
        }
        if self.category != AttributeCategory::Color && self.description.trim().is_empty() {
            return Err(Error::Schema(format!(
                "{} prompt {} needs a description",
                self.category, self.prompt_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Real,
    Synthetic,
}

/// `Indeterminate` marks a VQA backend failure; it is excluded from training like `Rejected`
/// but kept distinct for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Unfiltered,
    Accepted,
    Rejected,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub class_id: u32,
    pub path: String,
    pub split: Split,
    pub kind: ImageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_real_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    pub filter_status: FilterStatus,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<FilterVerdict>,
}

impl ImageRecord {
    pub fn real(image_id: impl Into<String>, class_id: u32, path: impl Into<String>, split: Split) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            class_id,
            path: path.into(),
            split,
            kind: ImageKind::Real,
            parent_real_id: None,
            prompt_id: None,
            filter_status: FilterStatus::Unfiltered,
            seed: 0,
            attempt: None,
            verdict: None,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.kind == ImageKind::Synthetic
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            ImageKind::Real => {
                if self.parent_real_id.is_some() || self.prompt_id.is_some() {
                    return Err(Error::Schema(format!(
                        "real image {} must not carry parent/prompt ids",
                        self.image_id
                    )));
                }
                if self.filter_status != FilterStatus::Unfiltered {
                    return Err(Error::Schema(format!(
                        "real image {} cannot carry a filter verdict",
                        self.image_id
                    )));
                }
            }
            ImageKind::Synthetic => {
                if self.parent_real_id.is_none() || self.prompt_id.is_none() {
                    return Err(Error::Schema(format!(
                        "synthetic image {} needs parent_real_id and prompt_id",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A generation job that could not produce an image. Kept so that reruns can report it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub job_id: String,
    pub real_image_id: String,
    pub prompt_id: String,
    pub attempt: u32,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prompts,
    Maps,
    Priors,
    Generate,
    Filter,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prompts => "prompts",
            Stage::Maps => "maps",
            Stage::Priors => "priors",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
        }
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Prompts => None,
            Stage::Maps => Some(Stage::Prompts),
            Stage::Priors => Some(Stage::Maps),
            Stage::Generate => Some(Stage::Priors),
            Stage::Filter => Some(Stage::Generate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_id: String,
    pub classes: Vec<ClassEntry>,
    pub prompts: Vec<PromptRecord>,
    pub images: Vec<ImageRecord>,
    pub failures: Vec<JobFailure>,
    pub pipeline_config_hash: String,
    pub created_at: String,
    pub stages: BTreeSet<Stage>,
}

impl Manifest {
    pub fn new(dataset_id: impl Into<String>) -> Self {
        Manifest {
            dataset_id: dataset_id.into(),
            ..Default::default()
        }
    }

    pub fn class(&self, class_id: u32) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn prompt(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn real_images(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images
            .iter()
            .filter(move |i| i.kind == ImageKind::Real && i.split == split)
    }

    /// Insert or replace a prompt by id.
    pub fn upsert_prompt(&mut self, record: PromptRecord) {
        match self.prompts.iter_mut().find(|p| p.prompt_id == record.prompt_id) {
            Some(slot) => *slot = record,
            None => self.prompts.push(record),
        }
    }

    /// Insert or replace an image by id.
    pub fn upsert_image(&mut self, record: ImageRecord) {
        match self.images.iter_mut().find(|i| i.image_id == record.image_id) {
            Some(slot) => *slot = record,
            None => self.images.push(record),
        }
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if let Some(req) = stage.prerequisite() {
            if !self.stages.contains(&req) {
                return Err(Error::StageOrder {
                    stage: stage.as_str(),
                    requires: req.as_str(),
                });
            }
        }
        Ok(())
    }

    /// Synthetic images that passed filtering, optionally restricted to one category/feasibility.
    /// Rejected and indeterminate records never appear here.
    pub fn accepted_synthetic(
        &self,
        category: Option<AttributeCategory>,
        feasibility: Option<Feasibility>,
    ) -> Vec<&ImageRecord> {
        let prompts: HashMap<&str, &PromptRecord> =
            self.prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect();
        self.images
            .iter()
            .filter(|i| i.kind == ImageKind::Synthetic && i.filter_status == FilterStatus::Accepted)
            .filter(|i| {
                let Some(p) = i.prompt_id.as_deref().and_then(|id| prompts.get(id)) else {
                    return false;
                };
                category.is_none_or(|c| p.category == c) && feasibility.is_none_or(|f| p.feasibility == f)
            })
            .collect()
    }

    /// Check every invariant the manifest carries: unique ids, non-empty names, resolvable foreign keys.
    pub fn validate(&self) -> Result<()> {
        let mut class_ids = HashSet::new();
        for c in &self.classes {
            if c.name.trim().is_empty() {
                return Err(Error::Schema(format!("class {} has an empty name", c.class_id)));
            }
            if !class_ids.insert(c.class_id) {
                return Err(Error::Schema(format!("duplicate class_id {}", c.class_id)));
            }
        }
        let mut prompt_ids = HashSet::new();
        for p in &self.prompts {
            p.validate()?;
            if !class_ids.contains(&p.class_id) {
                return Err(Error::Schema(format!(
                    "prompt {} references unknown class {}",
                    p.prompt_id, p.class_id
                )));
            }
            if !prompt_ids.insert(p.prompt_id.as_str()) {
                return Err(Error::Schema(format!("duplicate prompt_id {}", p.prompt_id)));
            }
        }
        let mut image_ids = HashSet::new();
        for i in &self.images {
            if !image_ids.insert(i.image_id.as_str()) {
                return Err(Error::Schema(format!("duplicate image_id {}", i.image_id)));
            }
        }
        for i in &self.images {
            i.validate()?;
            if !class_ids.contains(&i.class_id) {
                return Err(Error::Schema(format!(
                    "image {} references unknown class {}",
                    i.image_id, i.class_id
                )));
            }
            if let Some(pid) = &i.prompt_id {
                if !prompt_ids.contains(pid.as_str()) {
                    return Err(Error::Schema(format!(
                        "image {} references unknown prompt {pid}",
                        i.image_id
                    )));
                }
            }
            if let Some(parent) = &i.parent_real_id {
                match self.image(parent) {
                    Some(r) if r.kind == ImageKind::Real => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "image {} references unknown real parent {parent}",
                            i.image_id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeds are kept inside the unsigned 32-bit range most diffusion backends accept.
pub const SEED_MASK: u64 = 0xFFFF_FFFF;

/// Stable seed for one generation attempt.
pub fn derive_seed(real_image_id: &str, prompt_id: &str, attempt: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(real_image_id.as_bytes());
    h.update([0u8]);
    h.update(prompt_id.as_bytes());
    h.update([0u8]);
    h.update(attempt.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) & SEED_MASK
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub job_id: String,
    pub real_image_id: String,
    pub prompt_id: String,
    pub category: AttributeCategory,
    pub feasibility: Feasibility,
    pub attempt: u32,
    pub seed: u64,
}

impl GenerationJob {
    pub fn new(
        real_image_id: &str,
        prompt: &PromptRecord,
        attempt: u32,
    ) -> Self {
        GenerationJob {
            job_id: job_id(real_image_id, &prompt.prompt_id, attempt),
            real_image_id: real_image_id.to_string(),
            prompt_id: prompt.prompt_id.clone(),
            category: prompt.category,
            feasibility: prompt.feasibility,
            attempt,
            seed: derive_seed(real_image_id, &prompt.prompt_id, attempt),
        }
    }

    /// The same job one attempt later, with a fresh seed.
    pub fn next_attempt(&self) -> Self {
        let attempt = self.attempt + 1;
        GenerationJob {
            job_id: job_id(&self.real_image_id, &self.prompt_id, attempt),
            seed: derive_seed(&self.real_image_id, &self.prompt_id, attempt),
            attempt,
            ..self.clone()
        }
    }
}

/// `{real_id}__{prompt_id}__{attempt}`, also used as the output file stem.
pub fn job_id(real_image_id: &str, prompt_id: &str, attempt: u32) -> String {
    format!("{real_image_id}__{prompt_id}__{attempt}")
}

/// Pair every real image with `k` accepted feasible and `k` accepted infeasible prompts of its
/// class for one attribute category.
///
/// Prompts are taken in `prompt_id` order; surplus accepted prompts beyond `k` are ignored.
/// Jobs are emitted per image, feasible block first, so the output order is a pure function
/// of the inputs.
pub fn pair_real_with_prompts(
    real_images: &[ImageRecord],
    prompt_bank: &[PromptRecord],
    category: AttributeCategory,
    k: usize,
) -> Result<Vec<GenerationJob>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut by_group: BTreeMap<(u32, Feasibility), Vec<&PromptRecord>> = BTreeMap::new();
    for p in prompt_bank
        .iter()
        .filter(|p| p.category == category && p.is_accepted())
    {
        by_group.entry((p.class_id, p.feasibility)).or_default().push(p);
    }
    for group in by_group.values_mut() {
        group.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    }

    let classes: BTreeSet<u32> = real_images.iter().map(|r| r.class_id).collect();
    for &class_id in &classes {
        for feasibility in Feasibility::ALL {
            let available = by_group.get(&(class_id, feasibility)).map_or(0, Vec::len);
            if available < k {
                return Err(Error::InsufficientPrompts {
                    class_id,
                    category,
                    feasibility,
                    available,
                    required: k,
                });
            }
        }
    }

    let mut jobs = Vec::with_capacity(real_images.len() * 2 * k);
    for real in real_images {
        for feasibility in Feasibility::ALL {
            let group = &by_group[&(real.class_id, feasibility)];
            for prompt in &group[..k] {
                jobs.push(GenerationJob::new(&real.image_id, prompt, 1));
            }
        }
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(id: &str, class_id: u32, feasibility: Feasibility, status: PromptStatus) -> PromptRecord {
        PromptRecord {
            prompt_id: id.into(),
            class_id,
            category: AttributeCategory::Background,
            feasibility,
            keyword: format!("kw {id}"),
            description: "a place".into(),
            status,
        }
    }

    fn bank(classes: &[u32], per_feasibility: usize) -> Vec<PromptRecord> {
        let mut out = Vec::new();
        for &c in classes {
            for f in Feasibility::ALL {
                for i in 0..per_feasibility {
                    out.push(prompt(
                        &format!("c{c}-{}-{i:03}", f.short()),
                        c,
                        f,
                        PromptStatus::ManualAccepted,
                    ));
                }
            }
        }
        out
    }

    fn reals(n: usize, classes: u32) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| ImageRecord::real(format!("r{i:04}"), i as u32 % classes, format!("r{i}.png"), Split::Train))
            .collect()
    }

    #[test]
    fn six_hundred_reals_five_prompts() {
        let jobs = pair_real_with_prompts(&reals(600, 3), &bank(&[0, 1, 2], 5), AttributeCategory::Background, 5)
            .unwrap();
        let f = jobs.iter().filter(|j| j.feasibility == Feasibility::Feasible).count();
        let i = jobs.iter().filter(|j| j.feasibility == Feasibility::Infeasible).count();
        assert_eq!((f, i), (3000, 3000));
    }

    #[test]
    fn zero_k_is_empty() {
        let jobs = pair_real_with_prompts(&reals(4, 1), &[], AttributeCategory::Color, 0).unwrap();
        assert!(jobs.is_empty());
    }

    #[test]
    fn two_by_two_matches_cross_product() {
        let reals = reals(2, 1);
        let jobs = pair_real_with_prompts(&reals, &bank(&[0], 3), AttributeCategory::Background, 2).unwrap();
        let got: Vec<(String, String)> = jobs
            .iter()
            .map(|j| (j.real_image_id.clone(), j.prompt_id.clone()))
            .collect();
        let mut expected = Vec::new();
        for r in ["r0000", "r0001"] {
            for p in ["c0-F-000", "c0-F-001", "c0-IF-000", "c0-IF-001"] {
                expected.push((r.to_string(), p.to_string()));
            }
        }
        assert_eq!(got, expected);
        let seeds: HashSet<u64> = jobs.iter().map(|j| j.seed).collect();
        assert_eq!(seeds.len(), jobs.len());
        assert!(jobs.iter().all(|j| j.attempt == 1));
    }

    #[test]
    fn insufficient_prompts_names_the_group() {
        let mut b = bank(&[0], 2);
        b.retain(|p| !(p.feasibility == Feasibility::Infeasible && p.prompt_id.ends_with("001")));
        let err = pair_real_with_prompts(&reals(2, 1), &b, AttributeCategory::Background, 2).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientPrompts { feasibility: Feasibility::Infeasible, available: 1, required: 2, .. }
        ));
    }

    #[test]
    fn rejected_prompts_do_not_count() {
        let mut b = bank(&[0], 2);
        for p in &mut b {
            p.status = PromptStatus::ManualRejected;
        }
        assert!(pair_real_with_prompts(&reals(1, 1), &b, AttributeCategory::Background, 1).is_err());
    }

    #[test]
    fn seed_is_stable_and_attempt_sensitive() {
        let a = derive_seed("r1", "p1", 1);
        assert_eq!(a, derive_seed("r1", "p1", 1));
        assert_ne!(a, derive_seed("r1", "p1", 2));
        assert_ne!(a, derive_seed("r1", "p2", 1));
        assert!(a <= SEED_MASK);
    }

    #[test]
    fn accepted_synthetic_excludes_rejected() {
        let mut m = Manifest::new("d");
        m.classes.push(ClassEntry { class_id: 0, name: "cat".into(), dataset_id: "d".into() });
        m.prompts.push(prompt("p0", 0, Feasibility::Feasible, PromptStatus::ManualAccepted));
        m.images.push(ImageRecord::real("r0", 0, "r0.png", Split::Train));
        for (id, status) in [("s0", FilterStatus::Accepted), ("s1", FilterStatus::Rejected), ("s2", FilterStatus::Indeterminate)] {
            m.images.push(ImageRecord {
                kind: ImageKind::Synthetic,
                parent_real_id: Some("r0".into()),
                prompt_id: Some("p0".into()),
                filter_status: status,
                ..ImageRecord::real(id, 0, format!("{id}.png"), Split::Train)
            });
        }
        m.validate().unwrap();
        let ids: Vec<&str> = m.accepted_synthetic(None, None).iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(ids, ["s0"]);
        assert!(m.accepted_synthetic(Some(AttributeCategory::Color), None).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pairing_is_pure_and_balanced(n in 0usize..12, classes in 1u32..4, k in 0usize..4) {
                let reals = reals(n, classes);
                let b = bank(&(0..classes).collect::<Vec<_>>(), 4);
                let a = pair_real_with_prompts(&reals, &b, AttributeCategory::Background, k).unwrap();
                let again = pair_real_with_prompts(&reals, &b, AttributeCategory::Background, k).unwrap();
                prop_assert_eq!(&a, &again);
                for c in 0..classes {
                    let ids: HashSet<&str> = reals.iter().filter(|r| r.class_id == c).map(|r| r.image_id.as_str()).collect();
                    let count = |f: Feasibility| a.iter().filter(|j| j.feasibility == f && ids.contains(j.real_image_id.as_str())).count();
                    prop_assert_eq!(count(Feasibility::Feasible), count(Feasibility::Infeasible));
                    prop_assert_eq!(count(Feasibility::Feasible), ids.len() * k);
                }
            }
        }
    }
}
