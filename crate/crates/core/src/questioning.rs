//! Discriminability of decomposed features, follow-up question selection and
//! the feature-masking protocol used to evaluate questioning.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{DiagnosticKg, KgError, Level, NodeId};
use crate::llm::{ChatBackend, Embedder, LlmError};
use crate::matcher::PatientQuery;
use crate::template::{vars, PromptTemplates, TemplateError, SHARED_SYSTEM};

#[derive(Debug, Error)]
pub enum QuestionError {
    #[error("node `{0}` has no manifestation edges")]
    Isolated(String),
    #[error("no features to ask about")]
    NoFeatures,
    #[error("invalid masking config: {0}")]
    Config(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityScore {
    pub node_id: NodeId,
    pub degree: usize,
    pub score: f64,
}

/// `(n - 1) / degree`, where `n` counts the decomposed feature nodes of the
/// whole graph. Rare features score high.
pub fn discriminability(kg: &DiagnosticKg, node: &str) -> Result<DiscriminabilityScore, QuestionError> {
    let n = kg.node_at(node, Level::L4d)?;
    let degree = kg.degree(node);
    if degree == 0 {
        return Err(QuestionError::Isolated(node.to_string()));
    }
    let total = kg.count_at(Level::L4d);
    Ok(DiscriminabilityScore {
        node_id: n.id.clone(),
        degree,
        score: (total - 1) as f64 / degree as f64,
    })
}

/// Sorts by descending score, ties by id.
fn ranked(kg: &DiagnosticKg, ids: impl IntoIterator<Item = NodeId>) -> Result<Vec<DiscriminabilityScore>, QuestionError> {
    let mut scores = ids
        .into_iter()
        .map(|id| discriminability(kg, id.as_str()))
        .collect::<Result<Vec<_>, _>>()?;
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.node_id.cmp(&b.node_id)));
    Ok(scores)
}

fn subcategory_features(kg: &DiagnosticKg, subcat: &str) -> Result<BTreeSet<NodeId>, QuestionError> {
    Ok(kg
        .subgraph_under(subcat)?
        .features
        .into_iter()
        .filter(|f| kg.node(f.as_str()).is_some_and(|n| n.level == Level::L4d))
        .collect())
}

/// The `count` highest-scoring decomposed features under `subcat`.
pub fn select_question_features(
    kg: &DiagnosticKg,
    subcat: &str,
    count: usize,
) -> Result<Vec<NodeId>, QuestionError> {
    select_question_features_excluding(kg, subcat, count, &BTreeSet::new())
}

/// [`select_question_features`] skipping the `exclude` set.
pub fn select_question_features_excluding(
    kg: &DiagnosticKg,
    subcat: &str,
    count: usize,
    exclude: &BTreeSet<NodeId>,
) -> Result<Vec<NodeId>, QuestionError> {
    let candidates = subcategory_features(kg, subcat)?
        .into_iter()
        .filter(|f| !exclude.contains(f));
    Ok(ranked(kg, candidates)?
        .into_iter()
        .take(count)
        .map(|s| s.node_id)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowUpQuestion {
    pub node_id: NodeId,
    pub text: String,
}

const VERBS: &[&str] = &[
    "affects", "appears", "comes", "decreases", "disappears", "eases", "gets", "goes", "improves",
    "increases", "interferes", "lasts", "limits", "occurs", "persists", "radiates", "recurs",
    "resolves", "spreads", "starts", "subsides", "wakes", "worsens",
];

fn verb_stem(verb: &str) -> &str {
    for suffix in ["ches", "shes", "sses", "xes", "oes"] {
        if verb.ends_with(suffix) {
            return &verb[..verb.len() - 2];
        }
    }
    verb.strip_suffix('s').unwrap_or(verb)
}

/// Deterministic yes/no phrasing of a feature label.
pub fn phrase_question(label: &str) -> String {
    let words: Vec<&str> = label.split_whitespace().collect();
    match words.as_slice() {
        [] => "Can you describe your symptoms?".to_string(),
        [subject, verb, rest @ ..] if VERBS.contains(verb) => {
            let tail = if rest.is_empty() { String::new() } else { format!(" {}", rest.join(" ")) };
            format!("Does the {subject} {}{tail}?", verb_stem(verb))
        }
        [subject, participle, rest @ ..] if participle.len() > 3 && participle.ends_with("ed") => {
            let tail = if rest.is_empty() { String::new() } else { format!(" {}", rest.join(" ")) };
            format!("Is the {subject} {participle}{tail}?")
        }
        _ => format!("Do you have {}?", words.join(" ")),
    }
}

fn usable_phrasing(response: &str) -> Option<String> {
    let line = response.trim();
    (!line.is_empty() && !line.contains('\n') && line.len() <= 300 && line.ends_with('?') && !line.contains('{'))
        .then(|| line.to_string())
}

/// One question per feature. With a chat backend, the question template is
/// sent and a single-line question reply is used verbatim; anything else
/// (including backend errors) falls back to [`phrase_question`].
pub fn generate_questions(
    features: &[NodeId],
    kg: &DiagnosticKg,
    chat: Option<&dyn ChatBackend>,
    templates: &PromptTemplates,
) -> Result<Vec<FollowUpQuestion>, QuestionError> {
    if features.is_empty() {
        return Err(QuestionError::NoFeatures);
    }
    features
        .iter()
        .map(|id| {
            let node = kg.node(id.as_str()).ok_or_else(|| KgError::UnknownNode(id.to_string()))?;
            let phrased = match chat {
                Some(chat) => {
                    let prompt = templates
                        .question
                        .render(&vars([("feature_label", node.label.clone())]))?;
                    match chat.chat(SHARED_SYSTEM, &prompt) {
                        Ok(reply) => usable_phrasing(&reply),
                        Err(e) => {
                            tracing::warn!(node = %id, error = %e, "question phrasing failed");
                            None
                        }
                    }
                }
                None => None,
            };
            Ok(FollowUpQuestion {
                node_id: id.clone(),
                text: phrased.unwrap_or_else(|| phrase_question(&node.label)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    /// Fraction of matched features to delete.
    #[serde(alias = "r")]
    pub ratio: f64,
    /// Query sentences more similar than this to a deleted node are removed.
    #[serde(alias = "t")]
    pub sentence_threshold: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            ratio: 0.0,
            sentence_threshold: 0.6,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), QuestionError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(QuestionError::Config("ratio must lie in [0, 1]".into()));
        }
        if !(self.sentence_threshold > 0.0 && self.sentence_threshold < 1.0) {
            return Err(QuestionError::Config("sentence_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Deletes the `ceil(ratio * |M|)` highest-scoring nodes of `M`, the matched
/// nodes that lie under `subcat`.
pub fn mask_features(
    kg: &DiagnosticKg,
    subcat: &str,
    matched: &BTreeSet<NodeId>,
    cfg: &MaskingConfig,
) -> Result<BTreeSet<NodeId>, QuestionError> {
    cfg.validate()?;
    let under = subcategory_features(kg, subcat)?;
    let pool: Vec<NodeId> = matched.intersection(&under).cloned().collect();
    let count = ((cfg.ratio * pool.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    Ok(ranked(kg, pool)?
        .into_iter()
        .take(count)
        .map(|s| s.node_id)
        .collect())
}

/// Removes every query feature whose similarity to a deleted node's label
/// exceeds `threshold`.
pub fn prune_query(
    query: &PatientQuery,
    deleted: &BTreeSet<NodeId>,
    kg: &DiagnosticKg,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<PatientQuery, QuestionError> {
    if deleted.is_empty() {
        return Ok(query.clone());
    }
    let labels = deleted
        .iter()
        .map(|id| {
            kg.node(id.as_str())
                .map(|n| n.label.clone())
                .ok_or_else(|| KgError::UnknownNode(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let vectors = embedder.embed(&labels)?;
    Ok(query.retain_features(|i| {
        let f = &query.feature_embeddings[i];
        vectors.iter().all(|v| f.cosine(v) <= threshold)
    }))
}
