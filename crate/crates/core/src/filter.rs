//! VQA-based verification of synthetic images against their prompt.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AttributeCategory, Feasibility, FilterStatus, GenerationJob, ImageRecord};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const CHOICES: [&str; 2] = ["yes", "no"];

const DEFAULT_QUESTIONS: &str = include_str!("../resources/filter_questions.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }

    fn from_bool(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    /// Lowercase, strip punctuation, prefix-match. `None` for anything else.
    pub fn normalize(reply: &str) -> Option<Answer> {
        let cleaned: String = reply
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect::<String>()
            .trim()
            .to_lowercase();
        if cleaned.starts_with("yes") {
            Some(Answer::Yes)
        } else if cleaned.starts_with("no") {
            Some(Answer::No)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expectation {
    Always(Answer),
    IfFeasible,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct QuestionTemplate {
    expected: Expectation,
    text: String,
}

/// Question templates for background and foreground (colour/texture) edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionTemplates {
    background: Vec<QuestionTemplate>,
    foreground: Vec<QuestionTemplate>,
}

impl Default for QuestionTemplates {
    fn default() -> Self {
        QuestionTemplates::parse(DEFAULT_QUESTIONS).expect("bundled filter questions parse")
    }
}

impl QuestionTemplates {
    pub fn parse(text: &str) -> Result<Self> {
        let mut background = Vec::new();
        let mut foreground = Vec::new();
        let mut current: Option<&mut Vec<QuestionTemplate>> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[background]" => current = Some(&mut background),
                "[foreground]" => current = Some(&mut foreground),
                _ => {
                    let (exp, q) = line
                        .split_once('|')
                        .ok_or_else(|| Error::Config(format!("filter questions line {}: expected `answer | question`", i + 1)))?;
                    let expected = match exp.trim() {
                        "yes" => Expectation::Always(Answer::Yes),
                        "no" => Expectation::Always(Answer::No),
                        "[FEASIBLE]" => Expectation::IfFeasible,
                        other => return Err(Error::Config(format!("filter questions line {}: bad answer `{other}`", i + 1))),
                    };
                    let section = current
                        .as_deref_mut()
                        .ok_or_else(|| Error::Config("filter question before a section header".into()))?;
                    section.push(QuestionTemplate { expected, text: q.trim().to_string() });
                }
            }
        }
        if background.is_empty() || foreground.is_empty() {
            return Err(Error::Config("filter questions need [background] and [foreground] sections".into()));
        }
        Ok(QuestionTemplates { background, foreground })
    }

    pub fn build(
        &self,
        category: AttributeCategory,
        class_name: &str,
        keyword: &str,
        feasibility: Feasibility,
    ) -> Vec<FilterQuestion> {
        let templates = match category {
            AttributeCategory::Background => &self.background,
            AttributeCategory::Color | AttributeCategory::Texture => &self.foreground,
        };
        templates
            .iter()
            .map(|t| FilterQuestion {
                text: t
                    .text
                    .replace("[CLS]", class_name)
                    .replace("[BACKGROUND]", keyword)
                    .replace("[COLOR/TEXTURE]", keyword),
                expected: match t.expected {
                    Expectation::Always(a) => a,
                    Expectation::IfFeasible => Answer::from_bool(feasibility.is_feasible()),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterQuestion {
    pub text: String,
    pub expected: Answer,
}

impl FilterQuestion {
    pub fn choices(&self) -> [&'static str; 2] {
        CHOICES
    }
}

pub fn build_questions(
    category: AttributeCategory,
    class_name: &str,
    attribute_keyword: &str,
    feasibility: Feasibility,
) -> Vec<FilterQuestion> {
    QuestionTemplates::default().build(category, class_name, attribute_keyword, feasibility)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsweredQuestion {
    pub text: String,
    pub expected: Answer,
    /// `None` when the backend failed or replied with something other than yes/no.
    pub answered: Option<Answer>,
}

impl AnsweredQuestion {
    pub fn matches(&self) -> bool {
        self.answered == Some(self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub image_id: String,
    pub answers: Vec<AnsweredQuestion>,
    pub accepted: bool,
}

impl FilterVerdict {
    pub fn new(image_id: impl Into<String>, answers: Vec<AnsweredQuestion>) -> Self {
        let accepted = !answers.is_empty() && answers.iter().all(AnsweredQuestion::matches);
        FilterVerdict { image_id: image_id.into(), answers, accepted }
    }

    /// A wrong answer rejects; otherwise any unanswered question makes the verdict indeterminate.
    pub fn status(&self) -> FilterStatus {
        if self.accepted {
            FilterStatus::Accepted
        } else if self.answers.iter().any(|a| a.answered.is_some() && !a.matches()) {
            FilterStatus::Rejected
        } else {
            FilterStatus::Indeterminate
        }
    }

    pub fn offending(&self) -> impl Iterator<Item = &AnsweredQuestion> {
        self.answers.iter().filter(|a| !a.matches())
    }
}

pub trait VqaBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Free-text reply; callers normalize it.
    fn ask(&self, image: &RgbImage, question: &str, choices: &[&str]) -> Result<String>;
}

/// Ask every question once and judge the answers.
pub fn filter_image(image_id: &str, image: &RgbImage, questions: &[FilterQuestion], vqa: &dyn VqaBackend) -> Result<FilterVerdict> {
    if questions.is_empty() {
        return Err(Error::Precondition("no filter questions".into()));
    }
    let answers = questions
        .iter()
        .map(|q| {
            let answered = match vqa.ask(image, &q.text, &CHOICES) {
                Ok(reply) => {
                    let a = Answer::normalize(&reply);
                    if a.is_none() {
                        log::warn!("vqa reply `{reply}` to `{}` is neither yes nor no", q.text);
                    }
                    a
                }
                Err(e) => {
                    log::warn!("vqa backend {} failed on `{}`: {e}", vqa.name(), q.text);
                    None
                }
            };
            AnsweredQuestion { text: q.text.clone(), expected: q.expected, answered }
        })
        .collect();
    Ok(FilterVerdict::new(image_id, answers))
}

/// Generate, judge, and regenerate with the next attempt until accepted or `max_attempts` is
/// spent. The returned record carries the last verdict and attempt number.
pub fn filter_and_retry(
    job: &GenerationJob,
    max_attempts: u32,
    questions: &[FilterQuestion],
    vqa: &dyn VqaBackend,
    generate: &mut dyn FnMut(&GenerationJob) -> Result<(ImageRecord, RgbImage)>,
) -> Result<ImageRecord> {
    if max_attempts == 0 {
        return Err(Error::Precondition("max_attempts must be >= 1".into()));
    }
    let mut current = job.clone();
    loop {
        let (mut record, image) = generate(&current)?;
        let verdict = filter_image(&record.image_id, &image, questions, vqa)?;
        record.filter_status = verdict.status();
        record.attempt = Some(current.attempt);
        record.verdict = Some(verdict);
        if record.filter_status == FilterStatus::Accepted || current.attempt >= job.attempt + max_attempts - 1 {
            return Ok(record);
        }
        current = current.next_attempt();
    }
}

// ---------------------------------------------------------------------------------------------
// Deterministic backends.

/// Replays queued replies, one per question.
pub struct ScriptedVqa {
    replies: Mutex<VecDeque<String>>,
    pub calls: AtomicUsize,
}

impl ScriptedVqa {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedVqa {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            calls: AtomicUsize::new(0),
        }
    }
}

impl VqaBackend for ScriptedVqa {
    fn name(&self) -> &str {
        "scripted-vqa"
    }

    fn ask(&self, _image: &RgbImage, _question: &str, _choices: &[&str]) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies
            .lock()
            .expect("vqa script lock")
            .pop_front()
            .ok_or_else(|| Error::BackendUnavailable { backend: "scripted-vqa".into(), message: "script exhausted".into() })
    }
}

pub struct FailingVqa;

impl VqaBackend for FailingVqa {
    fn name(&self) -> &str {
        "failing-vqa"
    }

    fn ask(&self, _image: &RgbImage, _question: &str, _choices: &[&str]) -> Result<String> {
        Err(Error::BackendUnavailable { backend: "failing-vqa".into(), message: "offline".into() })
    }
}

/// Answers as a well-behaved model would for a prompt bank. Feasibility questions about an
/// image whose earlier questions named an infeasible keyword get "no", everything else "yes".
/// With `flip_one_in = Some(n)`, about one in `n` (image, question) pairs gets the wrong
/// answer, which exercises the retry path.
pub struct BankVqa {
    infeasible_keywords: HashSet<String>,
    pub flip_one_in: Option<u64>,
    infeasible_images: Mutex<HashSet<[u8; 32]>>,
}

impl BankVqa {
    pub fn new<'a>(infeasible_keywords: impl IntoIterator<Item = &'a str>, flip_one_in: Option<u64>) -> Self {
        BankVqa {
            infeasible_keywords: infeasible_keywords.into_iter().map(|k| k.to_lowercase()).collect(),
            flip_one_in,
            infeasible_images: Mutex::new(HashSet::new()),
        }
    }
}

fn is_feasibility_question(q: &str) -> bool {
    q.contains("feasible") || q.contains("real world")
}

impl VqaBackend for BankVqa {
    fn name(&self) -> &str {
        "bank-vqa"
    }

    fn ask(&self, image: &RgbImage, question: &str, _choices: &[&str]) -> Result<String> {
        let q = question.to_lowercase();
        let image_key: [u8; 32] = Sha256::digest(image.as_raw()).into();
        let mut seen = self.infeasible_images.lock().expect("vqa state lock");
        if self.infeasible_keywords.iter().any(|k| q.contains(k.as_str())) {
            seen.insert(image_key);
        }
        let mut yes = !(is_feasibility_question(&q) && seen.contains(&image_key));
        drop(seen);
        if let Some(n) = self.flip_one_in.filter(|&n| n > 0) {
            let mut h = Sha256::new();
            h.update(image_key);
            h.update(question.as_bytes());
            let d = h.finalize();
            if u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % n == 0 {
                yes = !yes;
            }
        }
        Ok(if yes { "Yes." } else { "No." }.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageKind, PromptRecord, PromptStatus};

    #[test]
    fn feasible_background_expects_all_yes() {
        let qs = build_questions(AttributeCategory::Background, "Abyssinian", "sunny windowsill", Feasibility::Feasible);
        assert_eq!(qs.len(), 4);
        assert!(qs.iter().all(|q| q.expected == Answer::Yes));
        assert!(qs[0].text.contains("sunny windowsill"));
        assert!(qs[2].text.contains("Abyssinian"));
        assert!(qs.iter().all(|q| !q.text.contains('[')));
    }

    #[test]
    fn infeasible_color_expects_yes_no() {
        let qs = build_questions(AttributeCategory::Color, "737-500", "purple", Feasibility::Infeasible);
        let expected: Vec<Answer> = qs.iter().map(|q| q.expected).collect();
        assert_eq!(expected, vec![Answer::Yes, Answer::No]);
        assert_eq!(qs[0].text, "Does the image show a purple 737-500?");
    }

    #[test]
    fn feasibility_flip_changes_only_feasibility_questions() {
        for (cat, changed) in [
            (AttributeCategory::Background, vec![2, 3]),
            (AttributeCategory::Color, vec![1]),
            (AttributeCategory::Texture, vec![1]),
        ] {
            let f = build_questions(cat, "c", "k", Feasibility::Feasible);
            let i = build_questions(cat, "c", "k", Feasibility::Infeasible);
            let diff: Vec<usize> = (0..f.len()).filter(|&j| f[j] != i[j]).collect();
            assert_eq!(diff, changed);
            for j in diff {
                assert_eq!(f[j].text, i[j].text);
            }
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(Answer::normalize(" Yes."), Some(Answer::Yes));
        assert_eq!(Answer::normalize("NO, it is not"), Some(Answer::No));
        assert_eq!(Answer::normalize("'yes'"), Some(Answer::Yes));
        assert_eq!(Answer::normalize("maybe"), None);
        assert_eq!(Answer::normalize(""), None);
    }

    fn img() -> RgbImage {
        RgbImage::new(2, 2)
    }

    #[test]
    fn all_expected_answers_accept() {
        let qs = build_questions(AttributeCategory::Background, "cat", "beach", Feasibility::Infeasible);
        let vqa = ScriptedVqa::new(["yes", "yes", "no", "no"]);
        let v = filter_image("s", &img(), &qs, &vqa).unwrap();
        assert!(v.accepted);
        assert_eq!(v.status(), FilterStatus::Accepted);
        assert_eq!(vqa.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn wrong_answer_is_recorded() {
        let qs = build_questions(AttributeCategory::Background, "cat", "beach", Feasibility::Infeasible);
        let vqa = ScriptedVqa::new(["yes", "yes", "yes", "no"]);
        let v = filter_image("s", &img(), &qs, &vqa).unwrap();
        assert!(!v.accepted);
        assert_eq!(v.status(), FilterStatus::Rejected);
        let off: Vec<&AnsweredQuestion> = v.offending().collect();
        assert_eq!(off.len(), 1);
        assert_eq!(off[0].text, qs[2].text);
    }

    #[test]
    fn backend_failure_is_indeterminate() {
        let qs = build_questions(AttributeCategory::Texture, "cat", "fur", Feasibility::Feasible);
        let v = filter_image("s", &img(), &qs, &FailingVqa).unwrap();
        assert_eq!(v.status(), FilterStatus::Indeterminate);
        assert!(filter_image("s", &img(), &[], &FailingVqa).is_err());
    }

    fn combos(n: usize) -> impl Iterator<Item = Vec<&'static str>> {
        (0..1u32 << n).map(move |bits| (0..n).map(|i| if bits >> i & 1 == 1 { "yes" } else { "no" }).collect())
    }

    #[test]
    fn exactly_one_accepting_combination() {
        for cat in AttributeCategory::ALL {
            for feas in Feasibility::ALL {
                let qs = build_questions(cat, "c", "k", feas);
                let accepting = combos(qs.len())
                    .filter(|answers| filter_image("s", &img(), &qs, &ScriptedVqa::new(answers.clone())).unwrap().accepted)
                    .count();
                assert_eq!(accepting, 1, "{cat} {feas}");
            }
        }
    }

    fn job() -> GenerationJob {
        let p = PromptRecord {
            prompt_id: "p".into(),
            class_id: 0,
            category: AttributeCategory::Color,
            feasibility: Feasibility::Feasible,
            keyword: "red".into(),
            description: String::new(),
            status: PromptStatus::ManualAccepted,
        };
        GenerationJob::new("r", &p, 1)
    }

    fn fake_generate(calls: &mut u32) -> impl FnMut(&GenerationJob) -> Result<(ImageRecord, RgbImage)> + '_ {
        move |j: &GenerationJob| {
            *calls += 1;
            let mut r = ImageRecord::real(j.job_id.clone(), 0, format!("{}.png", j.job_id), crate::model::Split::Train);
            r.kind = ImageKind::Synthetic;
            r.parent_real_id = Some(j.real_image_id.clone());
            r.prompt_id = Some(j.prompt_id.clone());
            r.seed = j.seed;
            Ok((r, img()))
        }
    }

    fn qs() -> Vec<FilterQuestion> {
        build_questions(AttributeCategory::Color, "c", "red", Feasibility::Feasible)
    }

    #[test]
    fn accept_on_first_attempt() {
        let mut calls = 0;
        let vqa = ScriptedVqa::new(["yes", "yes"]);
        let r = filter_and_retry(&job(), 3, &qs(), &vqa, &mut fake_generate(&mut calls)).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(r.filter_status, FilterStatus::Accepted);
        assert_eq!(r.attempt, Some(1));
    }

    #[test]
    fn accept_on_third_attempt() {
        let mut calls = 0;
        let vqa = ScriptedVqa::new(["no", "yes", "yes", "no", "yes", "yes"]);
        let r = filter_and_retry(&job(), 3, &qs(), &vqa, &mut fake_generate(&mut calls)).unwrap();
        assert_eq!(calls, 3);
        assert_eq!(r.filter_status, FilterStatus::Accepted);
        assert_eq!(r.attempt, Some(3));
        assert_ne!(r.seed, job().seed);
    }

    #[test]
    fn exhausted_attempts_reject() {
        let mut calls = 0;
        let vqa = ScriptedVqa::new(std::iter::repeat_n("no", 6));
        let r = filter_and_retry(&job(), 3, &qs(), &vqa, &mut fake_generate(&mut calls)).unwrap();
        assert_eq!(calls, 3);
        assert_eq!(r.filter_status, FilterStatus::Rejected);
        assert!(r.verdict.unwrap().answers.iter().all(|a| a.answered == Some(Answer::No)));
        let mut calls = 0;
        assert!(filter_and_retry(&job(), 0, &qs(), &vqa, &mut fake_generate(&mut calls)).is_err());
    }

    #[test]
    fn bank_vqa_answers_consistently() {
        let vqa = BankVqa::new(["lava"], None);
        let f = build_questions(AttributeCategory::Background, "dog", "park", Feasibility::Feasible);
        assert!(filter_image("a", &img(), &f, &vqa).unwrap().accepted);
        let i = build_questions(AttributeCategory::Background, "dog", "lava", Feasibility::Infeasible);
        assert!(filter_image("a", &img(), &i, &vqa).unwrap().accepted);
    }

    #[test]
    fn custom_templates_parse() {
        let t = QuestionTemplates::parse("[background]\nyes | Is it [BACKGROUND]?\n[foreground]\n[FEASIBLE] | Real [COLOR/TEXTURE] [CLS]?\n").unwrap();
        let q = t.build(AttributeCategory::Color, "cat", "blue", Feasibility::Infeasible);
        assert_eq!(q, vec![FilterQuestion { text: "Real blue cat?".into(), expected: Answer::No }]);
        assert!(QuestionTemplates::parse("yes | orphan").is_err());
        assert!(QuestionTemplates::parse("[background]\nmaybe | x\n[foreground]\nyes | y").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn acceptance_is_conjunctive(cat in 0usize..3, feas in 0usize..2, flip in 0usize..4) {
                let qs = build_questions(AttributeCategory::ALL[cat], "c", "k", Feasibility::ALL[feas]);
                let flip = flip % qs.len();
                let answers: Vec<&str> = qs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let a = if i == flip { Answer::from_bool(q.expected == Answer::No) } else { q.expected };
                        a.as_str()
                    })
                    .collect();
                let v = filter_image("s", &img(), &qs, &ScriptedVqa::new(answers)).unwrap();
                prop_assert!(!v.accepted);
            }

            #[test]
            fn question_text_is_stable(kw in "[a-z ]{1,12}", class in "[A-Za-z0-9-]{1,10}", cat in 0usize..3, feas in 0usize..2) {
                let a = build_questions(AttributeCategory::ALL[cat], &class, &kw, Feasibility::ALL[feas]);
                let b = build_questions(AttributeCategory::ALL[cat], &class, &kw, Feasibility::ALL[feas]);
                prop_assert_eq!(a, b);
            }
        }
    }
}
