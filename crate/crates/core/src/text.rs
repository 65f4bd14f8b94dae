//! Text normalization shared by graph construction, query decomposition and
//! prompt handling.

use serde::{Deserialize, Serialize};

/// Coarse type of a manifestation feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Symptom,
    Location,
    ActivityLimitation,
    Other,
}

const ACTIVITY_WORDS: &[&str] = &[
    "walk", "walking", "walks", "sit", "sitting", "sits", "stand", "standing", "stands", "bend",
    "bending", "lift", "lifting", "climb", "climbing", "run", "running", "move", "moving",
    "movement", "movements", "difficulty", "unable", "cannot", "limited", "limitation", "turn",
    "turning", "reach", "reaching", "kneel", "kneeling", "squat", "squatting", "exercise",
];

const LOCATION_WORDS: &[&str] = &[
    "located", "location", "region", "area", "site", "radiating", "radiates", "localized",
    "localised",
];

/// Lowercase, trim, collapse internal whitespace and strip terminal punctuation.
pub fn normalize_label(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end()
        .to_string()
}

/// Lowercase ASCII-alphanumeric slug with `_` separators.
pub fn slugify(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_sep = false;
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(c);
        } else {
            pending_sep = true;
        }
    }
    out
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Keyword heuristic: numeric data is `other`, motion and limitation verbs
/// are `activity_limitation`, explicit location words are `location`, and
/// everything else is a `symptom`.
pub fn classify_feature(feature: &str) -> FeatureKind {
    if feature.chars().any(|c| c.is_ascii_digit()) {
        return FeatureKind::Other;
    }
    let toks: Vec<String> = tokens(feature).collect();
    if toks.iter().any(|t| ACTIVITY_WORDS.contains(&t.as_str())) {
        FeatureKind::ActivityLimitation
    } else if toks.iter().any(|t| LOCATION_WORDS.contains(&t.as_str())) {
        FeatureKind::Location
    } else {
        FeatureKind::Symptom
    }
}

/// Extracts the first balanced JSON array from a model response and parses it
/// as a list of strings. Returns `None` when no such array exists.
pub fn extract_string_array(text: &str) -> Option<Vec<String>> {
    let body = strip_fence(text).unwrap_or(text);
    for (start, _) in body.match_indices('[') {
        if let Some(end) = balanced_end(&body[start..], '[', ']') {
            if let Ok(items) = serde_json::from_str::<Vec<String>>(&body[start..start + end]) {
                return Some(items);
            }
        }
    }
    None
}

/// Extracts a JSON object from text: a fenced ```json block wins, otherwise
/// the first balanced `{...}` that parses.
pub fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    if let Some(fenced) = strip_fence(text) {
        if let Ok(v @ serde_json::Value::Object(_)) = serde_json::from_str(fenced.trim()) {
            return Some(v);
        }
    }
    for (start, _) in text.match_indices('{') {
        if let Some(end) = balanced_end(&text[start..], '{', '}') {
            if let Ok(v @ serde_json::Value::Object(_)) =
                serde_json::from_str(&text[start..start + end])
            {
                return Some(v);
            }
        }
    }
    None
}

fn strip_fence(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(&body[..close])
}

/// Byte length of the balanced bracket expression at the start of `s`,
/// skipping brackets inside JSON string literals.
fn balanced_end(s: &str, open: char, close: char) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        } else if c == open {
            depth += 1;
        } else if c == close {
            depth = depth.checked_sub(1)?;
            if depth == 0 {
                return Some(i + c.len_utf8());
            }
        }
    }
    None
}
