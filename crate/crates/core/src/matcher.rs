//! Patient-side search over the diagnostic graph: decompose the query into
//! features, match them to decomposed (`L4d`) manifestation nodes, elect a
//! subcategory by shortest-path voting, and collect the augmented
//! differences under it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{DiagnosticKg, KgError, Level, NodeId, Relation};
use crate::llm::{Embedder, Embedding, LlmError};
use crate::text::normalize_label;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("manifestation text yields no features")]
    ZeroFeatures,
    #[error("cannot vote on an empty match set")]
    EmptyMatchSet,
    #[error("node `{0}` cannot reach any subcategory")]
    Unreachable(String),
    #[error("invalid match config: {0}")]
    Config(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn sentence_splitter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[;\n]|[.!?]+(?:\s+|$)").expect("valid regex"))
}

fn clause_splitter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i),\s*(?:and|but|or)\b|\b(?:and|but)\b").expect("valid regex"))
}

/// Splits manifestation text into normalized feature fragments.
///
/// Boundaries are semicolons, newlines, sentence terminators followed by
/// whitespace or end of text, a comma followed by `and`/`but`/`or`, and the
/// standalone words `and`/`but`. Fragments keep input order; empty ones are
/// dropped.
pub fn decompose(raw_text: &str) -> Result<Vec<String>, MatchError> {
    let features: Vec<String> = sentence_splitter()
        .split(raw_text)
        .flat_map(|s| clause_splitter().split(s))
        .map(normalize_label)
        .filter(|f| !f.is_empty())
        .collect();
    if features.is_empty() {
        return Err(MatchError::ZeroFeatures);
    }
    Ok(features)
}

/// A patient's manifestations with their decomposed, embedded features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientQuery {
    pub raw_text: String,
    pub features: Vec<String>,
    pub feature_embeddings: Vec<Embedding>,
}

impl PatientQuery {
    pub fn from_text(raw_text: &str, embedder: &dyn Embedder) -> Result<Self, MatchError> {
        let features = decompose(raw_text)?;
        let feature_embeddings = embedder.embed(&features)?;
        Ok(PatientQuery {
            raw_text: raw_text.to_string(),
            features,
            feature_embeddings,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Appends a feature, also to the raw text shown to the generator.
    pub fn push_feature(&mut self, feature: &str, embedding: Embedding) {
        if self.raw_text.trim().is_empty() {
            self.raw_text = feature.to_string();
        } else {
            self.raw_text = format!("{}; {}", self.raw_text.trim_end(), feature);
        }
        self.features.push(feature.to_string());
        self.feature_embeddings.push(embedding);
    }

    /// Keeps features for which `keep(index)` holds; the raw text becomes the
    /// remaining features joined by `"; "` when anything was removed.
    pub fn retain_features(&self, mut keep: impl FnMut(usize) -> bool) -> PatientQuery {
        let mut out = PatientQuery {
            raw_text: String::new(),
            features: Vec::new(),
            feature_embeddings: Vec::new(),
        };
        for (i, (f, e)) in self.features.iter().zip(&self.feature_embeddings).enumerate() {
            if keep(i) {
                out.features.push(f.clone());
                out.feature_embeddings.push(e.clone());
            }
        }
        out.raw_text = if out.features.len() == self.features.len() {
            self.raw_text.clone()
        } else {
            out.features.join("; ")
        };
        out
    }

    /// Renormalized mean of the feature embeddings.
    pub fn query_vector(&self) -> Option<Embedding> {
        Embedding::mean(&self.feature_embeddings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Top matches kept per feature.
    pub m: usize,
    /// Similarity must be strictly greater than this.
    pub t_matching: f64,
    /// Retrieval depth.
    pub k: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            m: 3,
            t_matching: 0.6,
            k: 5,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if self.m == 0 || self.k == 0 {
            return Err(MatchError::Config("m and k must be positive".into()));
        }
        if !(self.t_matching > 0.0 && self.t_matching < 1.0) {
            return Err(MatchError::Config("t_matching must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Embeddings of every `L4d` node label, in id order.
#[derive(Debug, Clone, Default)]
pub struct FeatureIndex {
    ids: Vec<NodeId>,
    vectors: Vec<Embedding>,
}

impl FeatureIndex {
    pub fn build(kg: &DiagnosticKg, embedder: &dyn Embedder) -> Result<Self, MatchError> {
        let nodes: Vec<_> = kg.nodes_at(Level::L4d).collect();
        if nodes.is_empty() {
            return Ok(FeatureIndex::default());
        }
        let labels: Vec<String> = nodes.iter().map(|n| n.label.clone()).collect();
        let vectors = embedder.embed(&labels)?;
        Ok(FeatureIndex {
            ids: nodes.into_iter().map(|n| n.id.clone()).collect(),
            vectors,
        })
    }

    pub fn from_parts(ids: Vec<NodeId>, vectors: Vec<Embedding>) -> Self {
        assert_eq!(ids.len(), vectors.len());
        FeatureIndex { ids, vectors }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, id: &str) -> Option<&Embedding> {
        self.ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .ok()
            .map(|i| &self.vectors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Embedding)> {
        self.ids.iter().zip(&self.vectors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub feature_index: usize,
    pub node_id: NodeId,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Union of the per-feature matches.
    pub matched: BTreeSet<NodeId>,
    /// Per-feature detail, ordered by feature then descending similarity.
    pub matches: Vec<FeatureMatch>,
}

/// For each feature keeps the `m` most similar `L4d` nodes whose cosine
/// similarity exceeds `t_matching`; equal similarities rank by node id.
pub fn match_features(query: &PatientQuery, index: &FeatureIndex, cfg: &MatchConfig) -> MatchOutcome {
    let mut out = MatchOutcome::default();
    for (fi, fv) in query.feature_embeddings.iter().enumerate() {
        let mut scored: Vec<(f64, &NodeId)> = index
            .iter()
            .map(|(id, v)| (fv.cosine(v), id))
            .filter(|(s, _)| *s > cfg.t_matching)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for (similarity, id) in scored.into_iter().take(cfg.m) {
            out.matched.insert(id.clone());
            out.matches.push(FeatureMatch {
                feature_index: fi,
                node_id: id.clone(),
                similarity,
            });
        }
    }
    out
}

/// Result of the subcategory election.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubcategoryVote {
    pub winner: NodeId,
    /// Exact vote mass per subcategory that received any vote.
    pub tally: BTreeMap<NodeId, Ratio<u128>>,
    /// Summed hop distance from all matched nodes; `None` when some matched
    /// node cannot reach the subcategory.
    pub distance_sums: BTreeMap<NodeId, Option<usize>>,
}

impl SubcategoryVote {
    pub fn votes(&self, id: &str) -> f64 {
        self.tally
            .get(id)
            .map_or(0.0, |r| *r.numer() as f64 / *r.denom() as f64)
    }

    pub fn total_mass(&self) -> Ratio<u128> {
        self.tally.values().copied().sum()
    }
}

/// Elects the subcategory closest to the matched nodes.
///
/// Each matched node votes for its nearest subcategory by undirected hop
/// distance, splitting one vote evenly across equidistant subcategories. The
/// highest tally wins; ties go to the smaller summed distance, then to the
/// smaller id.
pub fn vote_subcategory(
    matched: &BTreeSet<NodeId>,
    kg: &DiagnosticKg,
) -> Result<SubcategoryVote, MatchError> {
    if matched.is_empty() {
        return Err(MatchError::EmptyMatchSet);
    }
    let subcats: Vec<&NodeId> = kg.nodes_at(Level::L2).map(|n| &n.id).collect();
    let mut tally: BTreeMap<NodeId, Ratio<u128>> = BTreeMap::new();
    let mut sums: BTreeMap<NodeId, Option<usize>> =
        subcats.iter().map(|s| ((*s).clone(), Some(0))).collect();
    for t in matched {
        if kg.node(t.as_str()).is_none() {
            return Err(KgError::UnknownNode(t.to_string()).into());
        }
        let dist = kg.hop_distances(t.as_str());
        let mut best: Option<usize> = None;
        let mut closest = Vec::new();
        for s in &subcats {
            let d = dist.get(*s).copied();
            let sum = sums.get_mut(*s).expect("initialized");
            *sum = match (*sum, d) {
                (Some(acc), Some(d)) => Some(acc + d),
                _ => None,
            };
            let Some(d) = d else { continue };
            match best {
                Some(b) if d > b => {}
                Some(b) if d == b => closest.push(*s),
                _ => {
                    best = Some(d);
                    closest = vec![*s];
                }
            }
        }
        if closest.is_empty() {
            return Err(MatchError::Unreachable(t.to_string()));
        }
        let share = Ratio::new(1u128, closest.len() as u128);
        for s in closest {
            *tally.entry(s.clone()).or_insert_with(|| Ratio::from_integer(0)) += share;
        }
    }
    let winner = tally
        .iter()
        .max_by(|(a, va), (b, vb)| {
            va.cmp(vb)
                .then_with(|| {
                    let key = |id: &NodeId| sums[id].unwrap_or(usize::MAX);
                    key(b).cmp(&key(a))
                })
                .then_with(|| b.cmp(a))
        })
        .map(|(id, _)| id.clone())
        .expect("non-empty tally");
    sums.retain(|k, _| tally.contains_key(k));
    Ok(SubcategoryVote {
        winner,
        tally,
        distance_sums: sums,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiffTriple {
    pub disease: NodeId,
    pub relation: Relation,
    pub feature: NodeId,
}

/// Augmented manifestations of every disease under one subcategory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceSet {
    pub subcategory: NodeId,
    pub triples: BTreeSet<DiffTriple>,
}

impl DifferenceSet {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// `(disease label, feature labels)` in disease id order.
    pub fn grouped_labels(&self, kg: &DiagnosticKg) -> Vec<(String, Vec<String>)> {
        let mut groups: BTreeMap<&NodeId, Vec<String>> = BTreeMap::new();
        for t in &self.triples {
            groups
                .entry(&t.disease)
                .or_default()
                .push(label_of(kg, &t.feature));
        }
        groups
            .into_iter()
            .map(|(d, fs)| (label_of(kg, d), fs))
            .collect()
    }
}

fn label_of(kg: &DiagnosticKg, id: &NodeId) -> String {
    kg.node(id.as_str())
        .map_or_else(|| id.slug().replace('_', " "), |n| n.label.clone())
}

/// All `(disease, has_manifestation_of, L4a feature)` triples under `subcat`.
pub fn extract_differences(kg: &DiagnosticKg, subcat: &str) -> Result<DifferenceSet, MatchError> {
    let mut triples = BTreeSet::new();
    for d in kg.diseases_under(subcat)? {
        for f in kg.manifestations_of(d.as_str(), Level::L4a) {
            triples.insert(DiffTriple {
                disease: d.clone(),
                relation: Relation::HasManifestationOf,
                feature: f.clone(),
            });
        }
    }
    Ok(DifferenceSet {
        subcategory: NodeId::from(subcat),
        triples,
    })
}
