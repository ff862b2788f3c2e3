//! LLM backend interface, reply parsing and the deterministic backends shipped for tests.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, conversation: &[Message]) -> Result<String>;
}

/// One parsed list element: a keyword and its (possibly empty) description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyItem {
    pub keyword: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Str(String),
    List(Vec<Node>),
}

struct ListParser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl ListParser<'_> {
    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn parse_node(&mut self) -> Option<Node> {
        self.skip_ws();
        match *self.chars.peek()? {
            '[' | '(' => {
                let close = if self.chars.next()? == '[' { ']' } else { ')' };
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.chars.peek()? {
                        c if *c == close => {
                            self.chars.next();
                            return Some(Node::List(items));
                        }
                        ',' => {
                            self.chars.next();
                        }
                        _ => items.push(self.parse_node()?),
                    }
                }
            }
            '\'' | '"' => {
                let quote = self.chars.next()?;
                let mut s = String::new();
                loop {
                    match self.chars.next()? {
                        '\\' => s.push(self.chars.next()?),
                        c if c == quote => return Some(Node::Str(s)),
                        c => s.push(c),
                    }
                }
            }
            _ => {
                // bare word up to a delimiter, e.g. EMPTY inside a list
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if matches!(c, ',' | ']' | ')') {
                        break;
                    }
                    s.push(c);
                    self.chars.next();
                }
                let s = s.trim().to_string();
                (!s.is_empty()).then_some(Node::Str(s))
            }
        }
    }
}

fn split_item(text: &str) -> ReplyItem {
    for sep in [": ", " - ", " – ", " — ", ":"] {
        if let Some((k, d)) = text.split_once(sep) {
            return ReplyItem {
                keyword: k.trim().to_string(),
                description: d.trim().to_string(),
            };
        }
    }
    ReplyItem { keyword: text.trim().to_string(), description: String::new() }
}

fn is_empty_marker(s: &str) -> bool {
    s.trim().trim_matches(|c: char| c == '\'' || c == '"' || c == '.').eq_ignore_ascii_case("empty")
}

/// Parse an LLM reply into keyword/description pairs.
///
/// The first bracketed list in the reply is used; prose around it is ignored. Elements may be
/// `"keyword: description"` strings or `("keyword", "description")` pairs. A reply that is
/// (or whose list holds only) `EMPTY` yields no items.
pub fn parse_reply(reply: &str) -> Result<Vec<ReplyItem>> {
    if is_empty_marker(reply) {
        return Ok(Vec::new());
    }
    let Some(start) = reply.find('[') else {
        return Err(Error::MalformedReply(format!("no list found in reply: {}", truncate(reply))));
    };
    let mut parser = ListParser { chars: reply[start..].chars().peekable() };
    let Some(Node::List(items)) = parser.parse_node() else {
        return Err(Error::MalformedReply(format!("unterminated list in reply: {}", truncate(reply))));
    };
    let mut out = Vec::new();
    for item in items {
        match item {
            Node::Str(s) if is_empty_marker(&s) => {}
            Node::Str(s) => out.push(split_item(&s)),
            Node::List(parts) => match parts.as_slice() {
                [Node::Str(k)] => out.push(split_item(k)),
                [Node::Str(k), Node::Str(d), ..] => out.push(ReplyItem {
                    keyword: k.trim().to_string(),
                    description: d.trim().to_string(),
                }),
                _ => return Err(Error::MalformedReply("list element is not a keyword/description pair".into())),
            },
        }
    }
    out.retain(|i| !i.keyword.is_empty());
    Ok(out)
}

fn truncate(s: &str) -> String {
    s.chars().take(80).collect()
}

/// Format items the way replies are expected to look, for mocks and fixtures.
pub fn format_list(items: &[ReplyItem]) -> String {
    let quoted: Vec<String> = items
        .iter()
        .map(|i| {
            let s = if i.description.is_empty() {
                i.keyword.clone()
            } else {
                format!("{}: {}", i.keyword, i.description)
            };
            format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
        })
        .collect();
    format!("[{}]", quoted.join(", "))
}

/// Serves pre-recorded replies in order and records every conversation it receives.
pub struct CannedLlm {
    replies: Mutex<VecDeque<String>>,
    pub log: Mutex<Vec<Vec<Message>>>,
}

impl CannedLlm {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CannedLlm {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

impl LlmBackend for CannedLlm {
    fn name(&self) -> &str {
        "canned"
    }

    fn send(&self, conversation: &[Message]) -> Result<String> {
        self.log.lock().unwrap().push(conversation.to_vec());
        self.replies.lock().unwrap().pop_front().ok_or_else(|| Error::BackendUnavailable {
            backend: "canned".into(),
            message: "no recorded replies left".into(),
        })
    }
}

/// Backend that is never reachable.
pub struct OfflineLlm;

impl LlmBackend for OfflineLlm {
    fn name(&self) -> &str {
        "offline"
    }

    fn send(&self, _conversation: &[Message]) -> Result<String> {
        Err(Error::BackendUnavailable { backend: "offline".into(), message: "no connection".into() })
    }
}

const FEASIBLE_COLORS: &[&str] = &[
    "white", "black", "silver", "gray", "red", "blue", "dark blue", "brown", "beige", "dark green", "maroon", "navy",
];
const INFEASIBLE_COLORS: &[&str] = &[
    "neon pink", "neon green", "lime", "fuchsia", "hot pink", "electric blue", "chartreuse", "neon yellow",
    "neon orange", "lilac", "turquoise", "orchid",
];
const PLACES: &[&str] = &[
    "meadow", "beach", "forest trail", "city street", "living room", "garden", "snowfield", "desert road",
    "riverbank", "parking lot", "hangar", "runway", "mountain pass", "harbor", "farmyard",
];
const PLACE_MODIFIERS: &[&str] = &["sunny", "misty", "quiet", "busy", "autumn", "evening", "rainy", "bright"];
const ODD_PLACES: &[&str] = &[
    "ocean floor", "lava field", "moon surface", "volcano crater", "coral reef", "space station", "glacier cave",
    "war zone", "cloud bank", "underground mine",
];
const MATERIALS: &[&str] = &[
    "fur", "leather", "brushed metal", "carbon fiber", "matte paint", "glossy paint", "wool", "suede",
];
const ODD_MATERIALS: &[&str] = &[
    "fish scale", "brick wall", "tree bark", "marble", "honeycomb", "lava rock", "woven straw", "crystal",
    "moss", "snakeskin",
];

/// Procedural stand-in for a chat model, driven by the default request template.
///
/// Generation requests ("Please list N different <feasibility> <attributes> for the class C")
/// get N invented phrases; review requests (anything containing a list) get the list back
/// with every `drop_every`-th entry removed.
pub struct SyntheticLlm {
    pub drop_every: Option<usize>,
}

impl SyntheticLlm {
    fn generate(&self, feasible: bool, attribute: &str, class_name: &str, n: usize) -> Vec<ReplyItem> {
        let salt = class_name.bytes().fold(0usize, |a, b| a.wrapping_mul(31).wrapping_add(b as usize));
        let mut out = Vec::new();
        for i in 0..n {
            let j = i.wrapping_add(salt);
            let item = if attribute.starts_with("color") {
                let table = if feasible { FEASIBLE_COLORS } else { INFEASIBLE_COLORS };
                if i >= table.len() {
                    break;
                }
                ReplyItem { keyword: table[(j) % table.len()].to_string(), description: String::new() }
            } else if attribute.starts_with("background") {
                let (places, mods) = if feasible { (PLACES, PLACE_MODIFIERS) } else { (ODD_PLACES, PLACE_MODIFIERS) };
                let place = places[j % places.len()];
                let modifier = mods[(j / places.len() + i) % mods.len()];
                ReplyItem {
                    keyword: format!("{modifier} {place} {i}"),
                    description: format!("a {modifier} {place} filling the frame behind the subject"),
                }
            } else {
                let table = if feasible { MATERIALS } else { ODD_MATERIALS };
                let m = table[j % table.len()];
                ReplyItem {
                    keyword: format!("{m} {i}"),
                    description: format!("a surface covered in {m} with visible grain"),
                }
            };
            out.push(item);
        }
        out
    }
}

fn parse_request(text: &str) -> Option<(usize, bool, String, String)> {
    let rest = &text[text.find("Please list ")? + "Please list ".len()..];
    let (number, rest) = rest.split_once(" different ")?;
    let (attribute, rest) = rest.split_once(" for the class ")?;
    let class_name = rest.split(", each").next()?.trim().to_string();
    let (feas, attribute) = attribute.split_once(' ')?;
    Some((number.trim().parse().ok()?, feas == "feasible", attribute.to_string(), class_name))
}

impl LlmBackend for SyntheticLlm {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn send(&self, conversation: &[Message]) -> Result<String> {
        let last = conversation
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| Error::MalformedReply("conversation has no user turn".into()))?;
        if let Some((n, feasible, attribute, class_name)) = parse_request(&last.content) {
            let items = self.generate(feasible, &attribute, &class_name, n);
            if items.is_empty() {
                return Ok("EMPTY".into());
            }
            return Ok(format_list(&items));
        }
        let mut items = parse_reply(&last.content)?;
        if let Some(k) = self.drop_every.filter(|&k| k > 0) {
            items = items
                .into_iter()
                .enumerate()
                .filter(|(i, _)| (i + 1) % k != 0)
                .map(|(_, it)| it)
                .collect();
        }
        if items.is_empty() {
            return Ok("EMPTY".into());
        }
        Ok(format!("Here is the reviewed list:\n{}", format_list(&items)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_plain_list() {
        let items = parse_reply("['sunny windowsill: warm light on a ledge', 'garden: green lawn']").unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].keyword, "sunny windowsill");
        assert_eq!(items[0].description, "warm light on a ledge");
    }

    #[test]
    fn tolerates_surrounding_prose_and_tuples() {
        let reply = "Sure! Here you go:\n[(\"deep cave\", \"dark rock walls\"), (\"beach\", \"sand, sea\")]\nHope that helps.";
        let items = parse_reply(reply).unwrap();
        assert_eq!(items[1], ReplyItem { keyword: "beach".into(), description: "sand, sea".into() });
    }

    #[test]
    fn empty_marker_yields_nothing() {
        assert!(parse_reply("EMPTY").unwrap().is_empty());
        assert!(parse_reply("'EMPTY'").unwrap().is_empty());
        assert!(parse_reply("['EMPTY']").unwrap().is_empty());
    }

    #[test]
    fn malformed_replies_are_errors() {
        assert!(matches!(parse_reply("I cannot help"), Err(Error::MalformedReply(_))));
        assert!(matches!(parse_reply("['unterminated"), Err(Error::MalformedReply(_))));
    }

    #[test]
    fn format_then_parse_round_trips() {
        let items = vec![
            ReplyItem { keyword: "purple".into(), description: String::new() },
            ReplyItem { keyword: "say \"cheese\"".into(), description: "quoted: yes".into() },
        ];
        assert_eq!(parse_reply(&format_list(&items)).unwrap(), items);
    }

    #[test]
    fn synthetic_backend_answers_the_default_request() {
        let t = super::super::template::IclTemplate::default();
        let text = t.render("feasible backgrounds", "Abyssinian", 12);
        let reply = SyntheticLlm { drop_every: None }.send(&[Message::user(text)]).unwrap();
        let items = parse_reply(&reply).unwrap();
        assert_eq!(items.len(), 12);
        assert!(items.iter().all(|i| !i.description.is_empty()));
    }

    #[test]
    fn canned_backend_runs_dry() {
        let llm = CannedLlm::new(["a"]);
        assert_eq!(llm.send(&[]).unwrap(), "a");
        assert!(matches!(llm.send(&[]), Err(Error::BackendUnavailable { .. })));
        assert_eq!(llm.calls(), 2);
    }
}
