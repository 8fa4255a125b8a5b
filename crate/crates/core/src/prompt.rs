//! Prompt templates, rendering and token counting.

use serde::{Deserialize, Serialize};

use crate::data::{Query, Task};
use crate::error::{Error, Result};

/// Placeholder that marks where the answer goes.
pub const ANSWER_SLOT: &str = "answer";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// A template with `{name}` placeholders and exactly one `{answer}` slot.
///
/// Recognised input placeholders: `{input}`, `{math_problem}` and
/// `{sentence}` (all bound to the query text) and `{target}` (the stance
/// target).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateSpec", into = "TemplateSpec")]
pub struct PromptTemplate {
    pub task: Task,
    body: String,
    prefix: Vec<Segment>,
    suffix: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct TemplateSpec {
    task: Task,
    body: String,
}

impl TryFrom<TemplateSpec> for PromptTemplate {
    type Error = Error;
    fn try_from(s: TemplateSpec) -> Result<Self> {
        PromptTemplate::new(s.task, s.body)
    }
}

impl From<PromptTemplate> for TemplateSpec {
    fn from(t: PromptTemplate) -> Self {
        TemplateSpec {
            task: t.task,
            body: t.body,
        }
    }
}

const KNOWN_SLOTS: [&str; 5] = ["input", "math_problem", "sentence", "target", ANSWER_SLOT];

fn parse(body: &str) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else {
            return Err(Error::Template(format!("unclosed placeholder in {body:?}")));
        };
        let name = &rest[open + 1..open + close];
        if !KNOWN_SLOTS.contains(&name) {
            return Err(Error::Template(format!("unknown placeholder {{{name}}}")));
        }
        if open > 0 {
            out.push(Segment::Text(rest[..open].to_string()));
        }
        out.push(Segment::Slot(name.to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest.to_string()));
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn new(task: Task, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let segments = parse(&body)?;
        let slots = segments
            .iter()
            .filter(|s| matches!(s, Segment::Slot(n) if n == ANSWER_SLOT))
            .count();
        if slots != 1 {
            return Err(Error::Template(format!("template needs exactly one {{{ANSWER_SLOT}}} slot, found {slots}")));
        }
        let at = segments
            .iter()
            .position(|s| matches!(s, Segment::Slot(n) if n == ANSWER_SLOT))
            .unwrap();
        let suffix = segments[at + 1..].to_vec();
        let mut prefix = segments;
        prefix.truncate(at);
        Ok(PromptTemplate {
            task,
            body,
            prefix,
            suffix,
        })
    }

    /// Question/answer template for math word problems.
    pub fn mathqa() -> Self {
        Self::new(Task::MathQa, "Question: {math_problem}\nAnswer: {answer}.").unwrap()
    }

    /// Text/target stance template.
    pub fn stance() -> Self {
        Self::new(
            Task::Stance,
            "Text: {sentence}\nQuestion: Which stance-\"favor,\" \"against,\" or \"neutral\"-does the above text express toward {target}?\nAnswer: {answer}.",
        )
        .unwrap()
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::MathQa => Self::mathqa(),
            Task::Stance => Self::stance(),
        }
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    fn fill(&self, segments: &[Segment], query: &Query, answer: &str, out: &mut String) -> Result<()> {
        for seg in segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => match name.as_str() {
                    "input" | "math_problem" | "sentence" => out.push_str(&query.input_text),
                    "target" => match &query.target {
                        Some(t) => out.push_str(t),
                        None => {
                            return Err(Error::Template(format!(
                                "query {} has no target for {{target}}",
                                query.example_id
                            )))
                        }
                    },
                    _ => out.push_str(answer),
                },
            }
        }
        Ok(())
    }

    /// Renders the query up to (and excluding) the answer slot, with
    /// trailing whitespace removed.
    pub fn render_open(&self, query: &Query) -> Result<String> {
        let mut s = String::new();
        self.fill(&self.prefix, query, "", &mut s)?;
        s.truncate(s.trim_end().len());
        Ok(s)
    }

    /// The text that completes `render_open` into a full demonstration:
    /// `render_open(q) + answer_segment(q, a) == render_full(q, a)`.
    pub fn answer_segment(&self, query: &Query, answer: &str) -> Result<String> {
        let full = self.render_full(query, answer)?;
        let open = self.render_open(query)?;
        Ok(full[open.len()..].to_string())
    }

    pub fn render_full(&self, query: &Query, answer: &str) -> Result<String> {
        let mut s = String::new();
        self.fill(&self.prefix, query, answer, &mut s)?;
        s.push_str(answer);
        self.fill(&self.suffix, query, answer, &mut s)?;
        Ok(s)
    }
}

pub const SEGMENT_SEPARATOR: &str = "\n\n";

/// Concatenates the rendered demonstrations followed by the open query,
/// separated by a blank line. Order of `demos` is preserved.
pub fn render_prompt(query: &Query, demos: &[(&Query, &str)], template: &PromptTemplate) -> Result<String> {
    let mut parts = Vec::with_capacity(demos.len() + 1);
    for (demo, answer) in demos {
        if demo.example_id == query.example_id {
            return Err(Error::DemoIsTarget(demo.example_id.clone()));
        }
        parts.push(template.render_full(demo, answer)?);
    }
    parts.push(template.render_open(query)?);
    Ok(parts.join(SEGMENT_SEPARATOR))
}

/// Renders with each demo's own gold answer.
pub fn render_with_gold(query: &Query, demos: &[&Query], template: &PromptTemplate) -> Result<String> {
    let pairs: Vec<(&Query, &str)> = demos.iter().map(|d| (*d, d.gold_answer.as_str())).collect();
    render_prompt(query, &pairs, template)
}

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Counts maximal runs of non-whitespace characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

pub fn count_tokens(text: &str) -> u64 {
    WhitespaceTokenizer.count(text)
}

/// Endpoint-reported counts win over the local tokenizer.
pub fn resolve_token_count(local: &dyn Tokenizer, text: &str, endpoint: Option<u64>) -> u64 {
    endpoint.unwrap_or_else(|| local.count(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(id: &str, text: &str, gold: &str) -> Query {
        Query::new(id, Task::MathQa, text, gold)
    }

    #[test]
    fn empty_demos_render_open_query() {
        let t = PromptTemplate::mathqa();
        let out = render_prompt(&q("x", "What is 2+2?", "4"), &[], &t).unwrap();
        assert_eq!(out, "Question: What is 2+2?\nAnswer:");
    }

    #[test]
    fn demos_are_concatenated_in_order() {
        let t = PromptTemplate::mathqa();
        let d1 = q("d1", "one", "1");
        let d2 = q("d2", "two", "2");
        let out = render_prompt(&q("x", "three", "3"), &[(&d1, "1"), (&d2, "2")], &t).unwrap();
        assert_eq!(
            out,
            "Question: one\nAnswer: 1.\n\nQuestion: two\nAnswer: 2.\n\nQuestion: three\nAnswer:"
        );
    }

    #[test]
    fn demo_equal_to_target_is_rejected() {
        let t = PromptTemplate::mathqa();
        let x = q("x", "three", "3");
        assert!(matches!(render_prompt(&x, &[(&x, "3")], &t), Err(Error::DemoIsTarget(_))));
    }

    #[test]
    fn stance_template_binds_target() {
        let t = PromptTemplate::stance();
        let mut x = Query::new("s1", Task::Stance, "Taxes are great.", "favor");
        assert!(t.render_open(&x).is_err());
        x.target = Some("tax policy".into());
        let out = t.render_open(&x).unwrap();
        assert!(out.starts_with("Text: Taxes are great.\nQuestion: Which stance"));
        assert!(out.contains("toward tax policy?"));
        assert!(out.ends_with("Answer:"));
        assert_eq!(t.answer_segment(&x, "favor").unwrap(), " favor.");
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new(Task::MathQa, "Q: {input}").is_err());
        assert!(PromptTemplate::new(Task::MathQa, "Q: {bogus} {answer}").is_err());
        assert!(PromptTemplate::new(Task::MathQa, "Q: {input {answer}").is_err());
        let t: PromptTemplate = serde_json::from_str(r#"{"task":"mathqa","body":"Q: {input}\nA: {answer}"}"#).unwrap();
        assert_eq!(t.render_open(&q("a", "hi", "1")).unwrap(), "Q: hi\nA:");
    }

    #[test]
    fn token_counts() {
        assert_eq!(count_tokens("a b  c"), 3);
        assert_eq!(count_tokens(""), 0);
        assert_eq!(resolve_token_count(&WhitespaceTokenizer, "a b", Some(57)), 57);
        assert_eq!(resolve_token_count(&WhitespaceTokenizer, "a b", None), 2);
    }

    proptest! {
        #[test]
        fn rendering_has_k_answers_and_is_monotone(
            texts in proptest::collection::vec("[a-z{} ]{0,12}", 0..6),
            target in "[a-z ]{1,20}",
        ) {
            let t = PromptTemplate::mathqa();
            let demos: Vec<Query> = texts.iter().enumerate()
                .map(|(i, s)| q(&format!("d{i}"), s, &format!("{i}"))).collect();
            let x = q("x", &target, "0");
            let refs: Vec<&Query> = demos.iter().collect();
            let full = render_with_gold(&x, &refs, &t).unwrap();
            let bare = render_with_gold(&x, &[], &t).unwrap();
            prop_assert_eq!(full.matches("\nAnswer:").count(), demos.len() + 1);
            prop_assert!(full.ends_with("Answer:"));
            prop_assert!(count_tokens(&full) >= count_tokens(&bare));
            // open + segment reproduces the full demo
            let seg = t.answer_segment(&x, "17").unwrap();
            prop_assert_eq!(t.render_open(&x).unwrap() + &seg, t.render_full(&x, "17").unwrap());
        }
    }
}
