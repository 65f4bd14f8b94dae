//! Builds a [`DiagnosticKg`] from an EHR corpus.
//!
//! The pipeline runs in four steps:
//!
//! 1. [`cluster_diseases`] unifies free-text diagnosis names.
//! 2. [`aggregate_hierarchy`] asks the chat backend for subcategory and
//!    category topics and assigns each disease to its nearest topic.
//! 3. [`build_disease_kg`] creates levels L1 to L3 plus the decomposed `L4d`
//!    features of every record.
//! 4. [`augment_manifestations`] adds model-suggested distinguishing
//!    features (`L4a`) per disease.

mod cluster;
pub mod ddxplus;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

pub use cluster::{cluster_diseases, CanonicalDiseaseMap, DEFAULT_MERGE_THRESHOLD};

use crate::kg::{DiagnosticKg, KgEdge, KgError, Level, NodeId, Relation, Violation};
use crate::llm::{ChatBackend, Embedder, LlmError};
use crate::matcher::decompose;
use crate::template::{vars, PromptTemplates, TemplateError, SHARED_SYSTEM};
use crate::text::{classify_feature, extract_string_array, normalize_label, FeatureKind};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("duplicate record id `{0}`")]
    DuplicateRecord(String),
    #[error("record `{0}` has an empty diagnosis or manifestation text")]
    EmptyField(String),
    #[error("no diseases to aggregate")]
    NoDiseases,
    #[error("could not parse a topic list from backend response: {raw}")]
    TopicParse { raw: String },
    #[error("backend proposed no topics")]
    EmptyTopics,
    #[error("hierarchy has no subcategory for disease `{0}`")]
    MissingSubcategory(String),
    #[error("hierarchy has no category for subcategory `{0}`")]
    MissingCategory(String),
    #[error("built graph is invalid: {0:?}")]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One row of the EHR corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EhrRecord {
    pub record_id: String,
    pub diagnosis_raw: String,
    pub manifestation_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<BTreeMap<String, String>>,
}

/// Checks record id uniqueness and required fields.
pub fn validate_corpus(corpus: &[EhrRecord]) -> Result<(), BuildError> {
    if corpus.is_empty() {
        return Err(BuildError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for r in corpus {
        if !seen.insert(r.record_id.as_str()) {
            return Err(BuildError::DuplicateRecord(r.record_id.clone()));
        }
        if r.diagnosis_raw.trim().is_empty() || r.manifestation_text.trim().is_empty() {
            return Err(BuildError::EmptyField(r.record_id.clone()));
        }
    }
    Ok(())
}

/// Reads a JSON-lines corpus, skipping blank lines.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<EhrRecord>, BuildError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BuildError::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    validate_corpus(&out)?;
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[EhrRecord]) -> Result<(), BuildError> {
    let mut text = String::new();
    for r in corpus {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Normalized canonical disease label of a record.
pub fn disease_label(record: &EhrRecord, canonical: &CanonicalDiseaseMap) -> String {
    let raw = record.diagnosis_raw.trim();
    normalize_label(canonical.canonical(raw).unwrap_or(raw))
}

/// Disease to subcategory and subcategory to category.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HierarchyAssignment {
    pub disease_to_subcategory: BTreeMap<String, String>,
    pub subcategory_to_category: BTreeMap<String, String>,
}

impl HierarchyAssignment {
    pub fn subcategory_of(&self, disease: &str) -> Option<&str> {
        self.disease_to_subcategory.get(disease).map(String::as_str)
    }

    pub fn category_of(&self, subcategory: &str) -> Option<&str> {
        self.subcategory_to_category.get(subcategory).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub max_subcategories: usize,
    pub max_categories: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            max_subcategories: 12,
            max_categories: 4,
        }
    }
}

fn propose_topics(
    items: &[String],
    max_topics: usize,
    chat: &dyn ChatBackend,
    templates: &PromptTemplates,
) -> Result<Vec<String>, BuildError> {
    let prompt = templates.aggregation.render(&vars([
        ("items", items.join(", ")),
        ("max_topics", max_topics.to_string()),
    ]))?;
    let raw = chat.chat(SHARED_SYSTEM, &prompt)?;
    let parsed = extract_string_array(&raw).ok_or_else(|| BuildError::TopicParse { raw: raw.clone() })?;
    let mut seen = HashSet::new();
    let topics: Vec<String> = parsed
        .iter()
        .map(|t| normalize_label(t))
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .take(max_topics.max(1))
        .collect();
    if topics.is_empty() {
        return Err(BuildError::EmptyTopics);
    }
    Ok(topics)
}

/// Index of the topic nearest each item by cosine; ties go to the earlier topic.
fn assign_nearest(
    items: &[String],
    topics: &[String],
    embedder: &dyn Embedder,
) -> Result<Vec<usize>, BuildError> {
    let item_vecs = embedder.embed(items)?;
    let topic_vecs = embedder.embed(topics)?;
    Ok(item_vecs
        .iter()
        .map(|v| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, t) in topic_vecs.iter().enumerate() {
                let s = v.cosine(t);
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Two-level topic aggregation: the chat backend proposes subcategory topics
/// from the disease names and category topics from the used subcategories;
/// each item is then attached to its nearest topic by embedding similarity.
/// Topics that receive no member are dropped.
pub fn aggregate_hierarchy(
    diseases: &BTreeSet<String>,
    chat: &dyn ChatBackend,
    embedder: &dyn Embedder,
    templates: &PromptTemplates,
    cfg: &HierarchyConfig,
) -> Result<HierarchyAssignment, BuildError> {
    if diseases.is_empty() {
        return Err(BuildError::NoDiseases);
    }
    let diseases: Vec<String> = diseases.iter().cloned().collect();
    let sub_topics = propose_topics(&diseases, cfg.max_subcategories, chat, templates)?;
    let sub_of = assign_nearest(&diseases, &sub_topics, embedder)?;
    let disease_to_subcategory: BTreeMap<String, String> = diseases
        .iter()
        .zip(&sub_of)
        .map(|(d, &j)| (d.clone(), sub_topics[j].clone()))
        .collect();

    let used_subs: Vec<String> = sub_topics
        .iter()
        .filter(|t| disease_to_subcategory.values().any(|v| v == *t))
        .cloned()
        .collect();
    let cat_topics = propose_topics(&used_subs, cfg.max_categories, chat, templates)?;
    let cat_of = assign_nearest(&used_subs, &cat_topics, embedder)?;
    let subcategory_to_category = used_subs
        .iter()
        .zip(&cat_of)
        .map(|(s, &j)| (s.clone(), cat_topics[j].clone()))
        .collect();
    Ok(HierarchyAssignment {
        disease_to_subcategory,
        subcategory_to_category,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedFeature {
    pub disease: String,
    pub feature: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decomposition {
    /// Unique `(disease, feature)` pairs in first-seen corpus order.
    pub features: Vec<DecomposedFeature>,
    /// Records whose manifestation text produced no feature.
    pub skipped: Vec<String>,
}

/// Splits every record's manifestation text into features attached to the
/// record's canonical disease.
pub fn decompose_record_manifestations(
    corpus: &[EhrRecord],
    canonical: &CanonicalDiseaseMap,
) -> Decomposition {
    let mut out = Decomposition::default();
    let mut seen = HashSet::new();
    for r in corpus {
        let disease = disease_label(r, canonical);
        match decompose(&r.manifestation_text) {
            Ok(features) => {
                for feature in features {
                    if seen.insert((disease.clone(), feature.clone())) {
                        out.features.push(DecomposedFeature {
                            kind: classify_feature(&feature),
                            disease: disease.clone(),
                            feature,
                        });
                    }
                }
            }
            Err(_) => out.skipped.push(r.record_id.clone()),
        }
    }
    out
}

/// Builds levels L1 to L3 and the decomposed `L4d` features.
pub fn build_disease_kg(
    corpus: &[EhrRecord],
    canonical: &CanonicalDiseaseMap,
    hierarchy: &HierarchyAssignment,
) -> Result<DiagnosticKg, BuildError> {
    validate_corpus(corpus)?;
    let mut kg = DiagnosticKg::new();
    let diseases: BTreeSet<String> = corpus.iter().map(|r| disease_label(r, canonical)).collect();
    for d in &diseases {
        let sub = hierarchy
            .subcategory_of(d)
            .ok_or_else(|| BuildError::MissingSubcategory(d.clone()))?;
        let cat = hierarchy
            .category_of(sub)
            .ok_or_else(|| BuildError::MissingCategory(sub.to_string()))?;
        let l1 = kg.ensure_node(Level::L1, cat, None);
        let l2 = kg.ensure_node(Level::L2, sub, None);
        let l3 = kg.ensure_node(Level::L3, d, None);
        kg.add_edge(KgEdge::new(l2.clone(), l1, Relation::IsA))?;
        kg.add_edge(KgEdge::new(l3, l2, Relation::IsA))?;
    }
    let decomposition = decompose_record_manifestations(corpus, canonical);
    for id in &decomposition.skipped {
        warn!(record = %id, "record produced no manifestation features");
    }
    for f in &decomposition.features {
        let node = kg.ensure_node(Level::L4d, &f.feature, Some(f.kind));
        kg.add_edge(KgEdge::new(
            NodeId::for_label(Level::L3, &f.disease),
            node,
            Relation::HasManifestationOf,
        ))?;
    }
    let violations = kg.validate();
    if !violations.is_empty() {
        return Err(BuildError::Invalid(violations));
    }
    info!(
        nodes = kg.node_count(),
        edges = kg.edge_count(),
        "built disease graph"
    );
    Ok(kg)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AugmentReport {
    /// Diseases whose response was unusable, with the reason.
    pub skipped: Vec<(NodeId, String)>,
    pub nodes_added: usize,
    pub edges_added: usize,
}

/// Asks the chat backend, per disease, for manifestations that distinguish it
/// from the other diseases of its subcategory and attaches them as `L4a`
/// nodes. Existing nodes and edges are never removed or relabeled.
pub fn augment_manifestations(
    kg: &DiagnosticKg,
    chat: &dyn ChatBackend,
    templates: &PromptTemplates,
) -> Result<(DiagnosticKg, AugmentReport), BuildError> {
    let diseases: Vec<NodeId> = kg.nodes_at(Level::L3).map(|n| n.id.clone()).collect();
    let mut prompts = Vec::with_capacity(diseases.len());
    for d in &diseases {
        let label = &kg.node(d.as_str()).expect("listed node exists").label;
        let siblings: Vec<&str> = match kg.ancestors(d.as_str()) {
            Ok((l2, _)) => kg
                .diseases_under(l2.as_str())?
                .into_iter()
                .filter(|s| *s != d)
                .map(|s| kg.node(s.as_str()).expect("listed node exists").label.as_str())
                .collect(),
            Err(_) => Vec::new(),
        };
        let siblings = if siblings.is_empty() {
            "none".to_string()
        } else {
            siblings.join(", ")
        };
        prompts.push(templates.augmentation.render(&vars([
            ("disease", label.clone()),
            ("sibling_diseases", siblings),
        ]))?);
    }
    let responses: Vec<Result<String, LlmError>> = prompts
        .par_iter()
        .map(|p| chat.chat(SHARED_SYSTEM, p))
        .collect();

    let mut out = kg.clone();
    let mut report = AugmentReport::default();
    for (d, response) in diseases.iter().zip(responses) {
        let items = match response {
            Ok(raw) => match extract_string_array(&raw) {
                Some(items) => items,
                None => {
                    warn!(disease = %d, "augmentation response is not a JSON string array");
                    report.skipped.push((d.clone(), format!("unparseable response: {raw}")));
                    continue;
                }
            },
            Err(e) => {
                warn!(disease = %d, error = %e, "augmentation call failed");
                report.skipped.push((d.clone(), e.to_string()));
                continue;
            }
        };
        for item in items {
            let label = normalize_label(&item);
            if label.is_empty() {
                continue;
            }
            let before = out.node_count();
            let node = out.ensure_node(Level::L4a, &label, Some(classify_feature(&label)));
            report.nodes_added += out.node_count() - before;
            if out.add_edge(KgEdge::new(d.clone(), node, Relation::HasManifestationOf))? {
                report.edges_added += 1;
            }
        }
    }
    let violations = out.validate();
    if !violations.is_empty() {
        return Err(BuildError::Invalid(violations));
    }
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Cosine-distance threshold for merging diagnosis names.
    pub merge_threshold: f64,
    pub hierarchy: HierarchyConfig,
    /// Run the augmentation step.
    pub augment: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            hierarchy: HierarchyConfig::default(),
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub kg: DiagnosticKg,
    pub canonical: CanonicalDiseaseMap,
    pub hierarchy: HierarchyAssignment,
    pub augment: Option<AugmentReport>,
}

/// Runs the whole construction pipeline. A supplied `hierarchy` replaces
/// the topic aggregation step.
pub fn build_kg(
    corpus: &[EhrRecord],
    chat: &dyn ChatBackend,
    embedder: &dyn Embedder,
    templates: &PromptTemplates,
    cfg: &BuildConfig,
    hierarchy: Option<HierarchyAssignment>,
) -> Result<BuildOutput, BuildError> {
    validate_corpus(corpus)?;
    let names: Vec<String> = corpus.iter().map(|r| r.diagnosis_raw.clone()).collect();
    let canonical = cluster_diseases(&names, embedder, cfg.merge_threshold)?;
    info!(raw = names.len(), canonical = canonical.len(), "clustered diagnoses");
    let hierarchy = match hierarchy {
        Some(h) => h,
        None => {
            let diseases: BTreeSet<String> = corpus.iter().map(|r| disease_label(r, &canonical)).collect();
            aggregate_hierarchy(&diseases, chat, embedder, templates, &cfg.hierarchy)?
        }
    };
    let kg = build_disease_kg(corpus, &canonical, &hierarchy)?;
    let (kg, augment) = if cfg.augment {
        let (kg, report) = augment_manifestations(&kg, chat, templates)?;
        (kg, Some(report))
    } else {
        (kg, None)
    };
    Ok(BuildOutput {
        kg,
        canonical,
        hierarchy,
        augment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{toy_corpus, toy_disease_kg, toy_kg, TOY_AUGMENTED};
    use crate::llm::{FnChat, MockChat, MockEmbedder};

    fn identity_map(corpus: &[EhrRecord]) -> CanonicalDiseaseMap {
        CanonicalDiseaseMap::identity(corpus.iter().map(|r| r.diagnosis_raw.as_str()))
    }

    fn toy_hierarchy() -> HierarchyAssignment {
        let mut h = HierarchyAssignment::default();
        for (sub, diseases) in crate::fixtures::TOY_HIERARCHY {
            for d in *diseases {
                h.disease_to_subcategory.insert(d.to_string(), sub.to_string());
            }
            h.subcategory_to_category
                .insert(sub.to_string(), crate::fixtures::TOY_CATEGORY.into());
        }
        h
    }

    #[test]
    fn toy_corpus_builds_toy_disease_graph() {
        let corpus = toy_corpus();
        let kg = build_disease_kg(&corpus, &identity_map(&corpus), &toy_hierarchy()).unwrap();
        assert_eq!(kg, toy_disease_kg());
    }

    #[test]
    fn empty_corpus_and_missing_hierarchy_fail() {
        let map = CanonicalDiseaseMap::default();
        assert!(matches!(
            build_disease_kg(&[], &map, &toy_hierarchy()),
            Err(BuildError::EmptyCorpus)
        ));
        let corpus = toy_corpus();
        let mut h = toy_hierarchy();
        h.disease_to_subcategory.remove("sciatica");
        assert!(matches!(
            build_disease_kg(&corpus, &identity_map(&corpus), &h),
            Err(BuildError::MissingSubcategory(d)) if d == "sciatica"
        ));
    }

    #[test]
    fn decomposition_splits_and_dedups() {
        let rec = |id: &str| EhrRecord {
            record_id: id.into(),
            diagnosis_raw: "lumbar spondylosis".into(),
            manifestation_text: "stiffness in lower back; pain in lumbar region".into(),
            treatment_text: None,
            demographics: None,
        };
        let corpus = vec![rec("a"), rec("b")];
        let d = decompose_record_manifestations(&corpus, &identity_map(&corpus));
        let feats: Vec<_> = d.features.iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(feats, ["stiffness in lower back", "pain in lumbar region"]);
        assert!(d.features.iter().all(|f| f.disease == "lumbar spondylosis"));
        assert!(d.skipped.is_empty());
    }

    #[test]
    fn records_without_features_are_skipped() {
        let corpus = vec![EhrRecord {
            record_id: "x".into(),
            diagnosis_raw: "d".into(),
            manifestation_text: "; . ;".into(),
            treatment_text: None,
            demographics: None,
        }];
        let d = decompose_record_manifestations(&corpus, &identity_map(&corpus));
        assert_eq!(d.skipped, ["x"]);
    }

    #[test]
    fn corpus_validation() {
        let mut corpus = toy_corpus();
        corpus[1].record_id = corpus[0].record_id.clone();
        assert!(matches!(validate_corpus(&corpus), Err(BuildError::DuplicateRecord(_))));
        let mut corpus = toy_corpus();
        corpus[0].manifestation_text = "  ".into();
        assert!(matches!(validate_corpus(&corpus), Err(BuildError::EmptyField(_))));
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, &toy_corpus()).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), toy_corpus());
        std::fs::write(&path, "{\"record_id\": 1}\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(BuildError::Corpus { line: 1, .. })));
    }

    fn toy_augmenter() -> FnChat<impl Fn(&str, &str) -> Result<String, LlmError>> {
        FnChat(|_: &str, user: &str| {
            let disease = user
                .lines()
                .next()
                .and_then(|l| l.strip_prefix("Disease: "))
                .unwrap_or_default()
                .to_string();
            let items: Vec<&str> = TOY_AUGMENTED
                .iter()
                .filter(|(d, _)| *d == disease)
                .map(|(_, f)| *f)
                .collect();
            Ok(serde_json::to_string(&items).unwrap())
        })
    }

    #[test]
    fn augmentation_reproduces_toy_graph() {
        let (kg, report) =
            augment_manifestations(&toy_disease_kg(), &toy_augmenter(), &PromptTemplates::default())
                .unwrap();
        assert_eq!(kg, toy_kg());
        assert_eq!(report.nodes_added, 3);
        assert_eq!(report.edges_added, 3);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn augmentation_prompt_names_siblings() {
        let templates = PromptTemplates::default();
        let chat = crate::llm::RecordingChat::new(MockChat::new().with_fallback("[]"));
        let (kg, _) = augment_manifestations(&toy_disease_kg(), &chat, &templates).unwrap();
        assert_eq!(kg, toy_disease_kg());
        let sciatica = chat
            .exchanges()
            .into_iter()
            .find(|e| e.user_text.starts_with("Disease: sciatica"))
            .unwrap();
        assert!(sciatica
            .user_text
            .contains("lumbar canal stenosis, lumbar spondylosis"));
        let cervical = chat
            .exchanges()
            .into_iter()
            .find(|e| e.user_text.starts_with("Disease: cervical spondylosis"))
            .unwrap();
        assert!(cervical.user_text.contains("presentations: none"));
    }

    #[test]
    fn augmentation_skips_unparseable_and_dedups() {
        let chat = FnChat(|_: &str, user: &str| {
            Ok(if user.starts_with("Disease: sciatica") {
                "I cannot answer that".to_string()
            } else if user.starts_with("Disease: lumbar canal stenosis") {
                r#"["Pain alleviated when sitting.", "pain alleviated when sitting", "  "]"#.into()
            } else {
                "[]".into()
            })
        });
        let (kg, report) =
            augment_manifestations(&toy_disease_kg(), &chat, &PromptTemplates::default()).unwrap();
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0.as_str(), "L3:sciatica");
        assert_eq!(kg.count_at(Level::L4a), 1);
        assert_eq!(report.edges_added, 1);
        // monotone growth
        assert!(toy_disease_kg().edges().all(|e| kg.contains_edge(e)));
        // re-augmenting with the same answer adds nothing
        let (again, r2) = augment_manifestations(&kg, &chat, &PromptTemplates::default()).unwrap();
        assert_eq!(again, kg);
        assert_eq!((r2.nodes_added, r2.edges_added), (0, 0));
    }

    fn axis(dim: usize, i: usize, bump: &[(usize, f64)]) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        for (j, x) in bump {
            v[*j] += x;
        }
        v
    }

    #[test]
    fn scripted_aggregation_yields_toy_hierarchy() {
        let embedder = MockEmbedder::new(4)
            .with_vector("lumbar canal stenosis", axis(4, 0, &[(3, 0.2)])).unwrap()
            .with_vector("sciatica", axis(4, 0, &[(2, 0.3)])).unwrap()
            .with_vector("lumbar spondylosis", axis(4, 0, &[(1, 0.2)])).unwrap()
            .with_vector("cervical spondylosis", axis(4, 1, &[(0, 0.2)])).unwrap()
            .with_vector("lumbar pain", axis(4, 0, &[])).unwrap()
            .with_vector("neck pain", axis(4, 1, &[])).unwrap()
            .with_vector("musculoskeletal pain", axis(4, 2, &[(0, 0.5), (1, 0.5)])).unwrap();
        let chat = FnChat(|_: &str, user: &str| {
            Ok(if user.contains("Diseases: cervical") {
                "Here you go: [\"Lumbar pain\", \"neck pain\"]".to_string()
            } else {
                "[\"musculoskeletal pain\"]".to_string()
            })
        });
        let diseases: BTreeSet<String> = crate::fixtures::TOY_HIERARCHY
            .iter()
            .flat_map(|(_, ds)| ds.iter().map(|d| d.to_string()))
            .collect();
        let h = aggregate_hierarchy(
            &diseases,
            &chat,
            &embedder,
            &PromptTemplates::default(),
            &HierarchyConfig::default(),
        )
        .unwrap();
        assert_eq!(h, toy_hierarchy());
    }

    #[test]
    fn single_disease_single_topic_chain() {
        let chat = FnChat(|_: &str, user: &str| {
            Ok(if user.contains("Diseases: gout") {
                "[\"joint pain\"]".to_string()
            } else {
                "[\"rheumatology\"]".to_string()
            })
        });
        let h = aggregate_hierarchy(
            &BTreeSet::from(["gout".to_string()]),
            &chat,
            &MockEmbedder::new(8),
            &PromptTemplates::default(),
            &HierarchyConfig::default(),
        )
        .unwrap();
        assert_eq!(h.subcategory_of("gout"), Some("joint pain"));
        assert_eq!(h.category_of("joint pain"), Some("rheumatology"));
    }

    #[test]
    fn aggregation_errors() {
        let templates = PromptTemplates::default();
        let diseases = BTreeSet::from(["gout".to_string()]);
        let prose = MockChat::new().with_fallback("no list");
        let err = aggregate_hierarchy(&diseases, &prose, &MockEmbedder::new(4), &templates, &HierarchyConfig::default())
            .unwrap_err();
        assert!(matches!(err, BuildError::TopicParse { raw } if raw == "no list"));
        let empty = MockChat::new().with_fallback("[\" \"]");
        assert!(matches!(
            aggregate_hierarchy(&diseases, &empty, &MockEmbedder::new(4), &templates, &HierarchyConfig::default()),
            Err(BuildError::EmptyTopics)
        ));
        assert!(matches!(
            aggregate_hierarchy(&BTreeSet::new(), &empty, &MockEmbedder::new(4), &templates, &HierarchyConfig::default()),
            Err(BuildError::NoDiseases)
        ));
    }
}
