//! Four-tier diagnostic knowledge graph.
//!
//! Levels run from broad categories (`L1`) through subcategories (`L2`) and
//! diseases (`L3`) down to manifestation features (`L4a` for model-augmented
//! differences, `L4d` for features decomposed from records). `is_a` edges
//! point upward (`L3 -> L2 -> L1`); `has_manifestation_of` edges point from a
//! disease to its features.
//!
//! A [`DiagnosticKg`] is built in a single-writer phase and is read-only
//! afterwards; share it behind an `Arc`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{slugify, FeatureKind};

pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("node `{id}` is at level {actual}, expected {expected}")]
    WrongLevel {
        id: String,
        expected: Level,
        actual: Level,
    },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("edge {edge} references missing node id `{missing}`")]
    DanglingEdge { edge: String, missing: String },
    #[error("node `{0}` has no {1} parent")]
    MissingParent(String, Level),
    #[error("unsupported document version {0}")]
    Version(u32),
    #[error("graph failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("malformed graph document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
    L4a,
    L4d,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
            Level::L4a => "L4a",
            Level::L4d => "L4d",
        }
    }

    pub fn is_manifestation(self) -> bool {
        matches!(self, Level::L4a | Level::L4d)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    IsA,
    HasManifestationOf,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::IsA => "is_a",
            Relation::HasManifestationOf => "has_manifestation_of",
        })
    }
}

/// Node identifier of the form `<level>:<slug>`, e.g. `L3:sciatica`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    /// Level-prefixed slug of `label`.
    pub fn for_label(level: Level, label: &str) -> Self {
        NodeId(format!("{}:{}", level.as_str(), slugify(label)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The id without its level prefix.
    pub fn slug(&self) -> &str {
        self.0.split_once(':').map_or(&self.0, |(_, s)| s)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: NodeId,
    pub level: Level,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_kind: Option<FeatureKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KgEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub relation: Relation,
}

impl KgEdge {
    pub fn new(src: impl Into<NodeId>, dst: impl Into<NodeId>, relation: Relation) -> Self {
        KgEdge {
            src: src.into(),
            dst: dst.into(),
            relation,
        }
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

impl fmt::Display for KgEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} -{}-> {})", self.src, self.relation, self.dst)
    }
}

/// A broken graph invariant, naming the offending node or edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiagnosticKg {
    nodes: BTreeMap<NodeId, KgNode>,
    edges: BTreeSet<KgEdge>,
    outgoing: BTreeMap<NodeId, BTreeSet<(Relation, NodeId)>>,
    incoming: BTreeMap<NodeId, BTreeSet<(Relation, NodeId)>>,
}

impl PartialEq for DiagnosticKg {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl Eq for DiagnosticKg {}

/// The part of the graph below one subcategory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub subcategory: NodeId,
    pub diseases: BTreeSet<NodeId>,
    pub features: BTreeSet<NodeId>,
    pub edges: BTreeSet<KgEdge>,
}

#[derive(Serialize, Deserialize)]
struct KgDocument {
    version: u32,
    nodes: Vec<KgNode>,
    edges: Vec<KgEdge>,
}

impl DiagnosticKg {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from parts, rejecting duplicate ids and edges whose
    /// endpoints are missing. Level constraints are left to [`validate`].
    ///
    /// [`validate`]: DiagnosticKg::validate
    pub fn from_parts(
        nodes: impl IntoIterator<Item = KgNode>,
        edges: impl IntoIterator<Item = KgEdge>,
    ) -> Result<Self, KgError> {
        let mut kg = DiagnosticKg::new();
        for node in nodes {
            if kg.nodes.contains_key(&node.id) {
                return Err(KgError::DuplicateNode(node.id.0));
            }
            kg.insert_node(node);
        }
        for edge in edges {
            kg.add_edge(edge)?;
        }
        Ok(kg)
    }

    /// Inserts a node, replacing any node with the same id.
    pub fn insert_node(&mut self, node: KgNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    /// Adds a node unless one with this id exists. Returns the id.
    pub fn ensure_node(
        &mut self,
        level: Level,
        label: &str,
        feature_kind: Option<FeatureKind>,
    ) -> NodeId {
        let id = NodeId::for_label(level, label);
        self.nodes.entry(id.clone()).or_insert_with(|| KgNode {
            id: id.clone(),
            level,
            label: label.to_string(),
            feature_kind,
        });
        id
    }

    /// Adds an edge; returns `false` when it was already present.
    pub fn add_edge(&mut self, edge: KgEdge) -> Result<bool, KgError> {
        for end in [&edge.src, &edge.dst] {
            if !self.nodes.contains_key(end) {
                return Err(KgError::DanglingEdge {
                    edge: edge.to_string(),
                    missing: end.0.clone(),
                });
            }
        }
        if !self.edges.insert(edge.clone()) {
            return Ok(false);
        }
        self.outgoing
            .entry(edge.src.clone())
            .or_default()
            .insert((edge.relation, edge.dst.clone()));
        self.incoming
            .entry(edge.dst)
            .or_default()
            .insert((edge.relation, edge.src));
        Ok(true)
    }

    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &KgEdge> {
        self.edges.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_edge(&self, edge: &KgEdge) -> bool {
        self.edges.contains(edge)
    }

    /// Nodes at `level`, in id order.
    pub fn nodes_at(&self, level: Level) -> impl Iterator<Item = &KgNode> {
        self.nodes.values().filter(move |n| n.level == level)
    }

    pub fn count_at(&self, level: Level) -> usize {
        self.nodes_at(level).count()
    }

    /// Looks a node up by level and case-insensitive label.
    pub fn find_by_label(&self, level: Level, label: &str) -> Option<&KgNode> {
        let wanted = crate::text::normalize_label(label);
        self.nodes_at(level)
            .find(|n| crate::text::normalize_label(&n.label) == wanted)
    }

    pub fn node_at(&self, id: &str, level: Level) -> Result<&KgNode, KgError> {
        let node = self
            .nodes
            .get(id)
            .ok_or_else(|| KgError::UnknownNode(id.to_string()))?;
        if node.level != level {
            return Err(KgError::WrongLevel {
                id: id.to_string(),
                expected: level,
                actual: node.level,
            });
        }
        Ok(node)
    }

    /// Targets of `relation` edges leaving `id`.
    pub fn out_neighbors<'a>(
        &'a self,
        id: &str,
        relation: Relation,
    ) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.outgoing
            .get(id)
            .into_iter()
            .flatten()
            .filter(move |(r, _)| *r == relation)
            .map(|(_, n)| n)
    }

    /// Sources of `relation` edges entering `id`.
    pub fn in_neighbors<'a>(
        &'a self,
        id: &str,
        relation: Relation,
    ) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.incoming
            .get(id)
            .into_iter()
            .flatten()
            .filter(move |(r, _)| *r == relation)
            .map(|(_, n)| n)
    }

    /// All neighbors regardless of edge direction or relation.
    pub fn undirected_neighbors<'a>(&'a self, id: &str) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.outgoing
            .get(id)
            .into_iter()
            .flatten()
            .chain(self.incoming.get(id).into_iter().flatten())
            .map(|(_, n)| n)
    }

    /// Number of edges touching `id`.
    pub fn degree(&self, id: &str) -> usize {
        self.outgoing.get(id).map_or(0, BTreeSet::len) + self.incoming.get(id).map_or(0, BTreeSet::len)
    }

    /// Checks every structural invariant. An empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for node in self.nodes.values() {
            if node.level.is_manifestation() != node.feature_kind.is_some() {
                out.push(Violation {
                    subject: node.id.to_string(),
                    message: if node.level.is_manifestation() {
                        "manifestation node lacks feature_kind".into()
                    } else {
                        "feature_kind set on a non-manifestation node".into()
                    },
                });
            }
        }
        for edge in &self.edges {
            let (src, dst) = (self.nodes[&edge.src].level, self.nodes[&edge.dst].level);
            let ok = match edge.relation {
                Relation::IsA => matches!((src, dst), (Level::L3, Level::L2) | (Level::L2, Level::L1)),
                Relation::HasManifestationOf => {
                    src == Level::L3 && matches!(dst, Level::L4a | Level::L4d)
                }
            };
            if !ok {
                out.push(Violation {
                    subject: edge.to_string(),
                    message: format!("{} edge may not connect {src} to {dst}", edge.relation),
                });
            }
        }
        for (level, parent_level) in [(Level::L3, Level::L2), (Level::L2, Level::L1)] {
            for node in self.nodes_at(level) {
                let parents = self
                    .out_neighbors(node.id.as_str(), Relation::IsA)
                    .filter(|p| self.nodes[*p].level == parent_level)
                    .count();
                if parents != 1 {
                    out.push(Violation {
                        subject: node.id.to_string(),
                        message: format!("expected exactly one is_a parent at {parent_level}, found {parents}"),
                    });
                }
            }
        }
        for node in self.nodes.values().filter(|n| n.level.is_manifestation()) {
            if self
                .in_neighbors(node.id.as_str(), Relation::HasManifestationOf)
                .next()
                .is_none()
            {
                out.push(Violation {
                    subject: node.id.to_string(),
                    message: "manifestation node has no has_manifestation_of edge".into(),
                });
            }
        }
        out
    }

    fn parent(&self, id: &str, parent_level: Level) -> Option<&NodeId> {
        self.out_neighbors(id, Relation::IsA)
            .find(|p| self.nodes[*p].level == parent_level)
    }

    /// The unique `(L2, L1)` ancestors of a disease.
    pub fn ancestors(&self, disease: &str) -> Result<(NodeId, NodeId), KgError> {
        self.node_at(disease, Level::L3)?;
        let l2 = self
            .parent(disease, Level::L2)
            .ok_or_else(|| KgError::MissingParent(disease.to_string(), Level::L2))?;
        let l1 = self
            .parent(l2.as_str(), Level::L1)
            .ok_or_else(|| KgError::MissingParent(l2.to_string(), Level::L1))?;
        Ok((l2.clone(), l1.clone()))
    }

    /// Diseases of a subcategory in id order.
    pub fn diseases_under(&self, subcat: &str) -> Result<Vec<&NodeId>, KgError> {
        self.node_at(subcat, Level::L2)?;
        Ok(self
            .in_neighbors(subcat, Relation::IsA)
            .filter(|d| self.nodes[*d].level == Level::L3)
            .collect())
    }

    /// Manifestations of a disease at the given level, in id order.
    pub fn manifestations_of<'a>(
        &'a self,
        disease: &str,
        level: Level,
    ) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.out_neighbors(disease, Relation::HasManifestationOf)
            .filter(move |f| self.nodes[*f].level == level)
    }

    /// Diseases under `subcat`, their manifestations, and the edges among them.
    pub fn subgraph_under(&self, subcat: &str) -> Result<Subgraph, KgError> {
        let diseases: BTreeSet<NodeId> = self.diseases_under(subcat)?.into_iter().cloned().collect();
        let mut features = BTreeSet::new();
        let mut edges = BTreeSet::new();
        for d in &diseases {
            edges.insert(KgEdge::new(d.clone(), NodeId::from(subcat), Relation::IsA));
            for f in self.out_neighbors(d.as_str(), Relation::HasManifestationOf) {
                if self.nodes[f].level.is_manifestation() {
                    features.insert(f.clone());
                    edges.insert(KgEdge::new(d.clone(), f.clone(), Relation::HasManifestationOf));
                }
            }
        }
        Ok(Subgraph {
            subcategory: NodeId::from(subcat),
            diseases,
            features,
            edges,
        })
    }

    /// Unweighted hop distances from `start` to every reachable node,
    /// treating edges as undirected.
    pub fn hop_distances(&self, start: &str) -> BTreeMap<&NodeId, usize> {
        let mut dist = BTreeMap::new();
        let Some((start_id, _)) = self.nodes.get_key_value(start) else {
            return dist;
        };
        dist.insert(start_id, 0);
        let mut queue = VecDeque::from([start_id]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[cur];
            for next in self.undirected_neighbors(cur.as_str()) {
                if !dist.contains_key(next) {
                    dist.insert(next, d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    /// Deterministic document text: nodes sorted by id, edges by (src, dst, relation).
    pub fn to_document(&self) -> String {
        let doc = KgDocument {
            version: DOCUMENT_VERSION,
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.iter().cloned().collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail");
        s.push('\n');
        s
    }

    /// Parses and validates a graph document.
    pub fn from_document(text: &str) -> Result<Self, KgError> {
        let doc: KgDocument = serde_json::from_str(text)?;
        if doc.version != DOCUMENT_VERSION {
            return Err(KgError::Version(doc.version));
        }
        let kg = DiagnosticKg::from_parts(doc.nodes, doc.edges)?;
        let violations = kg.validate();
        if !violations.is_empty() {
            return Err(KgError::Invalid(violations));
        }
        Ok(kg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KgError> {
        std::fs::write(path, self.to_document())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        Self::from_document(&std::fs::read_to_string(path)?)
    }
}
