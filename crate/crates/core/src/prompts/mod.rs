//! Attribute prompt generation, LLM self-check, manual curation, and final prompt rendering.

pub mod llm;
pub mod template;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttributeCategory, ClassEntry, Feasibility, PromptRecord, PromptStatus};
use llm::{format_list, parse_reply, LlmBackend, Message, ReplyItem};
use template::{attribute_phrase, IclTemplate};

pub fn prompt_id(class_id: u32, category: AttributeCategory, feasibility: Feasibility, index: usize) -> String {
    format!("c{class_id:04}-{}-{}-{index:03}", category.as_str(), feasibility.short())
}

/// Send once, retry once on a malformed reply.
fn ask_list(llm: &dyn LlmBackend, conversation: &[Message]) -> Result<(String, Vec<ReplyItem>)> {
    let reply = llm.send(conversation)?;
    match parse_reply(&reply) {
        Ok(items) => Ok((reply, items)),
        Err(Error::MalformedReply(first)) => {
            log::warn!("malformed reply from {} ({first}); asking again", llm.name());
            let reply = llm.send(conversation)?;
            let items = parse_reply(&reply)?;
            Ok((reply, items))
        }
        Err(e) => Err(e),
    }
}

fn generation_request(
    template: &IclTemplate,
    class: &ClassEntry,
    category: AttributeCategory,
    feasibility: Feasibility,
    n: usize,
) -> Message {
    Message::user(template.render(&attribute_phrase(category, feasibility), &class.name, n))
}

/// Ask the LLM for up to `n` attribute phrases for one class/category/feasibility group.
///
/// Keywords are deduplicated case-insensitively (first occurrence wins). Background and
/// texture entries without a description are dropped.
pub fn generate_attributes(
    class: &ClassEntry,
    category: AttributeCategory,
    feasibility: Feasibility,
    n: usize,
    llm: &dyn LlmBackend,
    template: &IclTemplate,
) -> Result<Vec<PromptRecord>> {
    if n == 0 {
        return Err(Error::Precondition("n must be >= 1".into()));
    }
    let request = generation_request(template, class, category, feasibility, n);
    let (_, items) = ask_list(llm, &[request])?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        if out.len() == n {
            break;
        }
        if !seen.insert(item.keyword.to_lowercase()) {
            continue;
        }
        if category != AttributeCategory::Color && item.description.is_empty() {
            log::warn!("dropping {category} keyword `{}` without a description", item.keyword);
            continue;
        }
        out.push(PromptRecord {
            prompt_id: prompt_id(class.class_id, category, feasibility, out.len()),
            class_id: class.class_id,
            category,
            feasibility,
            keyword: item.keyword,
            description: item.description,
            status: PromptStatus::Raw,
        });
    }
    Ok(out)
}

fn review_request(class: &ClassEntry, category: AttributeCategory, feasibility: Feasibility, items: &[ReplyItem]) -> Message {
    Message::user(format!(
        "Review the {} you gave for the class {}. Keep only entries that are certainly {} for this class and delete any you cannot guarantee. \
         Reply with the remaining entries as a list in the same format.\n{}",
        attribute_phrase(category, feasibility),
        class.name,
        feasibility.as_str(),
        format_list(items)
    ))
}

/// Ask the LLM to prune its own list. Survivors are the inputs whose keyword appears in the
/// reply; keywords the reply invents are ignored.
pub fn self_filter(records: &[PromptRecord], class: &ClassEntry, llm: &dyn LlmBackend, template: &IclTemplate) -> Result<Vec<PromptRecord>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    if let Some(bad) = records.iter().find(|r| r.status != PromptStatus::Raw) {
        return Err(Error::Precondition(format!("prompt {} is not raw", bad.prompt_id)));
    }
    if records.iter().any(|r| {
        r.class_id != first.class_id || r.category != first.category || r.feasibility != first.feasibility
    }) {
        return Err(Error::Precondition("self_filter takes one class/category/feasibility group".into()));
    }
    let items: Vec<ReplyItem> = records
        .iter()
        .map(|r| ReplyItem { keyword: r.keyword.clone(), description: r.description.clone() })
        .collect();
    let conversation = [
        generation_request(template, class, first.category, first.feasibility, records.len()),
        Message::assistant(format_list(&items)),
        review_request(class, first.category, first.feasibility, &items),
    ];
    let (_, kept) = ask_list(llm, &conversation)?;

    let known: HashSet<String> = records.iter().map(|r| r.keyword.to_lowercase()).collect();
    let mut keep = HashSet::new();
    for item in kept {
        let key = item.keyword.to_lowercase();
        if known.contains(&key) {
            keep.insert(key);
        } else {
            log::warn!("self-filter reply introduced unknown keyword `{}`; ignored", item.keyword);
        }
    }
    Ok(records
        .iter()
        .filter(|r| keep.contains(&r.keyword.to_lowercase()))
        .map(|r| PromptRecord { status: PromptStatus::SelfFiltered, ..r.clone() })
        .collect())
}

/// Manual accept/reject decisions, keyed by keyword (case-insensitive) or by prompt id.
///
/// File format, one decision per line (`#` comments allowed):
///
/// ```text
/// accept sunny windowsill
/// reject deep cave
/// reject id:c0003-background-F-012
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decisions {
    by_keyword: HashMap<String, bool>,
    by_prompt_id: HashMap<String, bool>,
}

impl Decisions {
    pub fn accept_keyword(&mut self, keyword: &str, accept: bool) {
        self.by_keyword.insert(keyword.trim().to_lowercase(), accept);
    }

    pub fn accept_prompt(&mut self, prompt_id: &str, accept: bool) {
        self.by_prompt_id.insert(prompt_id.trim().to_string(), accept);
    }

    pub fn all<'a>(keywords: impl IntoIterator<Item = &'a str>, accept: bool) -> Self {
        let mut d = Decisions::default();
        for k in keywords {
            d.accept_keyword(k, accept);
        }
        d
    }

    pub fn get(&self, record: &PromptRecord) -> Option<bool> {
        self.by_prompt_id
            .get(&record.prompt_id)
            .or_else(|| self.by_keyword.get(&record.keyword.to_lowercase()))
            .copied()
    }

    pub fn is_empty(&self) -> bool {
        self.by_keyword.is_empty() && self.by_prompt_id.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut d = Decisions::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (verb, target) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Config(format!("decisions line {}: expected `accept|reject <keyword>`", i + 1)))?;
            let accept = match verb.to_ascii_lowercase().as_str() {
                "accept" => true,
                "reject" => false,
                other => return Err(Error::Config(format!("decisions line {}: unknown verb `{other}`", i + 1))),
            };
            match target.trim().strip_prefix("id:") {
                Some(id) => d.accept_prompt(id, accept),
                None => d.accept_keyword(target, accept),
            }
        }
        Ok(d)
    }

    /// A decisions file listing `records`, all marked with `default_accept`, for a curator to edit.
    pub fn template_for(records: &[PromptRecord], default_accept: bool) -> String {
        let verb = if default_accept { "accept" } else { "reject" };
        let mut out = String::new();
        let mut last_group = None;
        for r in records {
            let group = (r.class_id, r.category, r.feasibility);
            if last_group != Some(group) {
                out.push_str(&format!("# class {} / {} / {}\n", r.class_id, r.category, r.feasibility));
                last_group = Some(group);
            }
            out.push_str(&format!("{verb} id:{}  # {}\n", r.prompt_id, r.keyword));
        }
        out
    }
}

/// Apply manual decisions: accepted records become `ManualAccepted`, everything else
/// `ManualRejected`. Rejected records are returned too so they stay auditable.
pub fn apply_manual_filter(records: &[PromptRecord], decisions: &Decisions) -> Result<Vec<PromptRecord>> {
    records
        .iter()
        .map(|r| {
            let accept = decisions.get(r).ok_or_else(|| Error::MissingDecision(r.keyword.clone()))?;
            let status = if accept { PromptStatus::ManualAccepted } else { PromptStatus::ManualRejected };
            Ok(PromptRecord { status, ..r.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub raw_count: usize,
    pub self_filtered_count: usize,
    pub manual_count: usize,
}

/// Fraction of raw prompts that survived manual curation.
pub fn acceptance_rate(stats: &GroupStats) -> Result<f64> {
    if stats.raw_count == 0 {
        return Err(Error::DivisionByZero("raw_count is zero"));
    }
    Ok(stats.manual_count as f64 / stats.raw_count as f64)
}

pub type GroupKey = (u32, AttributeCategory, Feasibility);

/// All prompt records of a dataset with per-group lifecycle accounting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptBank {
    pub records: Vec<PromptRecord>,
}

impl PromptBank {
    pub fn new(records: Vec<PromptRecord>) -> Self {
        PromptBank { records }
    }

    /// Every record started raw; self-filter survivors are those that moved past `Raw`.
    pub fn stats(&self) -> BTreeMap<GroupKey, GroupStats> {
        let mut out: BTreeMap<GroupKey, GroupStats> = BTreeMap::new();
        for r in &self.records {
            let s = out.entry((r.class_id, r.category, r.feasibility)).or_default();
            s.raw_count += 1;
            if r.status != PromptStatus::Raw {
                s.self_filtered_count += 1;
            }
            if r.status == PromptStatus::ManualAccepted {
                s.manual_count += 1;
            }
        }
        out
    }

    /// Accepted prompts of one group in stable id order, trimmed to `k`.
    pub fn accepted(&self, class_id: u32, category: AttributeCategory, feasibility: Feasibility, k: usize) -> Vec<&PromptRecord> {
        let mut v: Vec<&PromptRecord> = self
            .records
            .iter()
            .filter(|r| r.class_id == class_id && r.category == category && r.feasibility == feasibility && r.is_accepted())
            .collect();
        v.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
        v.truncate(k);
        v
    }
}

/// Final text prompt for the editing backends.
///
/// Background: `a photo of a <class> in the <keyword>`; colour/texture:
/// `a photo of a <keyword> <class>`; either followed by `, <description>` when one exists.
pub fn render_prompt(record: &PromptRecord, class: &ClassEntry) -> String {
    let mut text = match record.category {
        AttributeCategory::Background => format!("a photo of a {} in the {}", class.name, record.keyword),
        AttributeCategory::Color | AttributeCategory::Texture => {
            format!("a photo of a {} {}", record.keyword, class.name)
        }
    };
    if !record.description.trim().is_empty() {
        text.push_str(", ");
        text.push_str(record.description.trim());
    }
    text
}

/// The classifier's text prompt for a class.
pub fn class_prompt(class_name: &str) -> String {
    format!("a photo of {class_name}")
}
