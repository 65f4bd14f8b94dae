//! `{placeholder}` prompt templates. `{{` and `}}` render as literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{name}` is missing required placeholder(s): {missing:?}")]
    MissingPlaceholders { name: String, missing: Vec<String> },
    #[error("template `{name}` has no value for placeholder `{placeholder}`")]
    Unbound { name: String, placeholder: String },
    #[error("template `{name}` has an unterminated placeholder at byte {at}")]
    Syntax { name: String, at: usize },
    #[error("io error reading template: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if matches!(chars.peek(), Some((_, '{'))) => {
                    chars.next();
                    text.push('{');
                }
                '}' if matches!(chars.peek(), Some((_, '}'))) => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut slot = String::new();
                    loop {
                        match chars.next() {
                            Some((_, '}')) => break,
                            Some((_, ch)) if ch.is_alphanumeric() || ch == '_' => slot.push(ch),
                            _ => {
                                return Err(TemplateError::Syntax {
                                    name: name.to_string(),
                                    at: i,
                                })
                            }
                        }
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(slot));
                }
                _ => text.push(c),
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Ok(Template {
            name: name.to_string(),
            pieces,
        })
    }

    pub fn load(name: &str, path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        Self::parse(name, &std::fs::read_to_string(path)?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.as_str()),
                Piece::Text(_) => None,
            })
            .collect()
    }

    /// Fails unless every name in `required` appears as a placeholder.
    pub fn require(self, required: &[&str]) -> Result<Self, TemplateError> {
        let have = self.placeholders();
        let missing: Vec<String> = required
            .iter()
            .filter(|r| !have.contains(*r))
            .map(|r| r.to_string())
            .collect();
        if missing.is_empty() {
            Ok(self)
        } else {
            Err(TemplateError::MissingPlaceholders {
                name: self.name,
                missing,
            })
        }
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(values.get(s.as_str()).ok_or_else(|| {
                    TemplateError::Unbound {
                        name: self.name.clone(),
                        placeholder: s.clone(),
                    }
                })?),
            }
        }
        Ok(out)
    }
}

/// Convenience for building render maps: `vars![("a", x), ("b", y)]`.
pub fn vars<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}

/// Every prompt the pipeline sends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    /// Topic proposal for hierarchy aggregation: `{items}`, `{max_topics}`.
    pub aggregation: Template,
    /// Manifestation augmentation: `{disease}`, `{sibling_diseases}`.
    pub augmentation: Template,
    /// Instruction block of the diagnosis prompt.
    pub diagnosis_system: Template,
    /// Answer template and information block: `{query}`, `{documents}`, `{differences}`.
    pub diagnosis_user: Template,
    /// Baseline prompt without the differences block: `{query}`, `{documents}`.
    pub naive_user: Template,
    /// Follow-up question phrasing: `{feature_label}`.
    pub question: Template,
}

pub const SHARED_SYSTEM: &str = include_str!("../templates/system.txt");

impl PromptTemplates {
    pub const FILES: [(&'static str, &'static [&'static str]); 6] = [
        ("aggregation.txt", &["items", "max_topics"]),
        ("augmentation.txt", &["disease", "sibling_diseases"]),
        ("diagnosis_system.txt", &[]),
        ("diagnosis_user.txt", &["query", "documents", "differences"]),
        ("naive_user.txt", &["query", "documents"]),
        ("question.txt", &["feature_label"]),
    ];

    /// Loads each template from `dir` when the file exists, otherwise uses the
    /// built-in default.
    pub fn load_dir(dir: Option<&Path>) -> Result<Self, TemplateError> {
        let defaults = [
            include_str!("../templates/aggregation.txt"),
            include_str!("../templates/augmentation.txt"),
            include_str!("../templates/diagnosis_system.txt"),
            include_str!("../templates/diagnosis_user.txt"),
            include_str!("../templates/naive_user.txt"),
            include_str!("../templates/question.txt"),
        ];
        let mut loaded = Vec::with_capacity(6);
        for ((file, required), default) in Self::FILES.iter().zip(defaults) {
            let path = dir.map(|d| d.join(file)).filter(|p| p.exists());
            let t = match path {
                Some(p) => Template::load(file, p)?,
                None => Template::parse(file, default)?,
            };
            loaded.push(t.require(required)?);
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("six templates");
        Ok(PromptTemplates {
            aggregation: next(),
            augmentation: next(),
            diagnosis_system: next(),
            diagnosis_user: next(),
            naive_user: next(),
            question: next(),
        })
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::load_dir(None).expect("built-in templates are valid")
    }
}
