//! In-context-learning request templates.
//!
//! Template files are plain text split into sections by `## name` lines:
//!
//! ```text
//! ## task
//! ...
//! ## criteria
//! - rule one
//! - rule two
//! ## positive_example
//! ...
//! ## negative_example
//! ...
//! ## question
//! Please list [NUMBER] different [Attribute] for the class [CLASS], ...
//! ```

use crate::error::{Error, Result};
use crate::model::{AttributeCategory, Feasibility};

pub const PH_ATTRIBUTE: &str = "[Attribute]";
pub const PH_CLASS: &str = "[CLASS]";
pub const PH_NUMBER: &str = "[NUMBER]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IclTemplate {
    pub task_text: String,
    pub criteria: Vec<String>,
    pub positive_example: String,
    pub negative_example_with_reasons: String,
    pub question_text: String,
}

const DEFAULT_TEMPLATE: &str = "\
## task
You produce attribute phrases for image generation. For a given object class, list [Attribute] together with a one-sentence description of how each one looks. Feasible attributes are ones the class is routinely seen with in real photographs; infeasible attributes are ones it is never seen with.
## criteria
- Every phrase must be distinct; do not list synonyms of an earlier phrase.
- When no phrase satisfies the request, reply with the single word EMPTY.
- Reply with a Python-style list of strings, each written as \"phrase: description\", exactly like the example answer.
## positive_example
Object class: golden retriever
Request: three feasible backgrounds
Answer: [\"city park lawn: short green grass with trees and a footpath behind\", \"sandy beach: pale sand meeting shallow blue water\", \"living room rug: a patterned rug in a warmly lit room\"]
## negative_example
Answer: [\"park\", \"grass park\", \"outer space\"]
Reasons: \"park\" and \"grass park\" are synonyms, no descriptions are given, and \"outer space\" was requested as feasible although a dog is never photographed there.
## question
Please list [NUMBER] different [Attribute] for the class [CLASS], each with a short visual description.
";

impl Default for IclTemplate {
    fn default() -> Self {
        IclTemplate::parse(DEFAULT_TEMPLATE).expect("default template is well formed")
    }
}

impl IclTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("## ") {
                sections.push((name.trim().to_ascii_lowercase(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else if !line.trim().is_empty() {
                return Err(Error::Config("template text before the first `## section`".into()));
            }
        }
        let take = |name: &str| -> Result<String> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, body)| body.join("\n").trim().to_string())
                .ok_or_else(|| Error::Config(format!("template is missing section `{name}`")))
        };
        let criteria = take("criteria")?
            .lines()
            .map(|l| l.trim().trim_start_matches('-').trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let template = IclTemplate {
            task_text: take("task")?,
            criteria,
            positive_example: take("positive_example")?,
            negative_example_with_reasons: take("negative_example")?,
            question_text: take("question")?,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        for ph in [PH_ATTRIBUTE, PH_CLASS, PH_NUMBER] {
            let n = self.question_text.matches(ph).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "question text must contain {ph} exactly once (found {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let criteria: Vec<String> = self.criteria.iter().map(|c| format!("- {c}")).collect();
        format!(
            "## task\n{}\n## criteria\n{}\n## positive_example\n{}\n## negative_example\n{}\n## question\n{}\n",
            self.task_text,
            criteria.join("\n"),
            self.positive_example,
            self.negative_example_with_reasons,
            self.question_text
        )
    }

    /// Fill the placeholders and assemble the full request message.
    pub fn render(&self, attribute: &str, class_name: &str, number: usize) -> String {
        let fill = |s: &str| {
            s.replace(PH_ATTRIBUTE, attribute)
                .replace(PH_CLASS, class_name)
                .replace(PH_NUMBER, &number.to_string())
        };
        let mut out = String::new();
        out.push_str("Task: ");
        out.push_str(&fill(&self.task_text));
        out.push_str("\n\nCriteria:\n");
        for (i, c) in self.criteria.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, fill(c)));
        }
        out.push_str("\nPositive example:\n");
        out.push_str(&fill(&self.positive_example));
        out.push_str("\n\nNegative example:\n");
        out.push_str(&fill(&self.negative_example_with_reasons));
        out.push_str("\n\nQuestion: ");
        out.push_str(&fill(&self.question_text));
        out
    }
}

/// "feasible backgrounds", "infeasible colors", ...
pub fn attribute_phrase(category: AttributeCategory, feasibility: Feasibility) -> String {
    let noun = match category {
        AttributeCategory::Background => "backgrounds",
        AttributeCategory::Color => "colors",
        AttributeCategory::Texture => "textures",
    };
    format!("{} {noun}", feasibility.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_round_trips() {
        let t = IclTemplate::default();
        assert_eq!(t.criteria.len(), 3);
        assert_eq!(IclTemplate::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn render_substitutes_every_placeholder() {
        let t = IclTemplate::default();
        let text = t.render("infeasible backgrounds", "Abyssinian", 70);
        assert!(text.contains("Please list 70 different infeasible backgrounds for the class Abyssinian"));
        for ph in [PH_ATTRIBUTE, PH_CLASS, PH_NUMBER] {
            assert!(!text.contains(ph));
        }
    }

    #[test]
    fn placeholder_count_is_enforced() {
        let mut t = IclTemplate::default();
        t.question_text = "Give [NUMBER] [Attribute] for [CLASS] and more [CLASS]".into();
        assert!(t.validate().is_err());
        t.question_text = "Give [NUMBER] [Attribute]".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn missing_section_is_an_error() {
        assert!(IclTemplate::parse("## task\nx\n## question\n[NUMBER] [Attribute] [CLASS]\n").is_err());
    }
}
