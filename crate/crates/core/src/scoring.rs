//! Answer extraction and correctness scoring.

use std::sync::OnceLock;

use regex::Regex;

use crate::data::Task;

/// Acceptance threshold on the binary score.
pub const SCORE_THRESHOLD: f64 = 0.5;

const ANSWER_MARKER: &str = "####";
const STANCE_LABELS: [&str; 3] = ["favor", "against", "neutral"];

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)").unwrap())
}

/// Canonical form of a numeric token: no sign noise, commas, leading zeros
/// or trailing fractional zeros. `"1,234.0"` becomes `"1234"`.
pub fn normalize_number(token: &str) -> Option<String> {
    let mut s: String = token.chars().filter(|&c| c != ',' && c != '$').collect();
    let negative = s.starts_with('-');
    s = s.trim_start_matches(['+', '-']).to_string();
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit() || c == '.') || s.matches('.').count() > 1 {
        return None;
    }
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i.to_string(), f.trim_end_matches('0').to_string()),
        None => (s.clone(), String::new()),
    };
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let mut out = String::new();
    let is_zero = int == "0" && frac.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(&frac);
    }
    Some(out)
}

/// Final numeric answer: first number after the last `####`, otherwise the
/// last number anywhere in the text.
pub fn extract_math_answer(text: &str) -> Option<String> {
    let re = number_re();
    if let Some(pos) = text.rfind(ANSWER_MARKER) {
        if let Some(m) = re.find(&text[pos + ANSWER_MARKER.len()..]) {
            return normalize_number(m.as_str());
        }
    }
    re.find_iter(text).last().and_then(|m| normalize_number(m.as_str()))
}

/// Earliest stance label mentioned in the text, lowercased.
pub fn extract_stance(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    STANCE_LABELS
        .iter()
        .filter_map(|label| lower.find(label).map(|pos| (pos, *label)))
        .min()
        .map(|(_, label)| label)
}

/// Returns `(score, correct)`; the score is binary and unparseable output
/// scores 0.
pub fn score_answer(task: Task, raw_output: &str, gold: &str) -> (f64, bool) {
    let hit = match task {
        Task::MathQa => match (extract_math_answer(raw_output), extract_math_answer(gold)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
        Task::Stance => match extract_stance(raw_output) {
            Some(label) => label == gold.trim().to_lowercase(),
            None => false,
        },
    };
    let score = if hit { 1.0 } else { 0.0 };
    (score, score > SCORE_THRESHOLD)
}
