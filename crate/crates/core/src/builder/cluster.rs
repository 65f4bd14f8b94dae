use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BuildError;
use crate::llm::Embedder;

/// Default average-linkage cosine-distance merge threshold.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.35;

/// Maps raw diagnosis strings onto canonical disease names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CanonicalDiseaseMap {
    assignments: BTreeMap<String, String>,
    clusters: BTreeMap<String, BTreeMap<String, usize>>,
}

impl CanonicalDiseaseMap {
    /// Every distinct name is its own cluster.
    pub fn identity<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for n in names {
            *counts.entry(n.trim().to_string()).or_default() += 1;
        }
        Self::from_clusters(counts.into_iter().map(|(n, c)| vec![(n, c)]))
    }

    /// Canonical name of each cluster: most frequent member, ties to the
    /// lexicographically smallest.
    fn from_clusters(clusters: impl IntoIterator<Item = Vec<(String, usize)>>) -> Self {
        let mut map = CanonicalDiseaseMap::default();
        for members in clusters {
            let canonical = members
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .map(|(n, _)| n.clone())
                .expect("clusters are non-empty");
            for (name, _) in &members {
                map.assignments.insert(name.clone(), canonical.clone());
            }
            map.clusters
                .insert(canonical, members.into_iter().collect());
        }
        map
    }

    pub fn canonical(&self, raw: &str) -> Option<&str> {
        self.assignments.get(raw.trim()).map(String::as_str)
    }

    pub fn canonical_names(&self) -> impl Iterator<Item = &str> {
        self.clusters.keys().map(String::as_str)
    }

    /// Members of each cluster with their frequencies, keyed by canonical name.
    pub fn clusters(&self) -> &BTreeMap<String, BTreeMap<String, usize>> {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Average-linkage agglomerative clustering of diagnosis names by cosine
/// distance between their embeddings. Clusters merge while the closest pair
/// is at most `threshold` apart; equal distances merge the pair that comes
/// first in sorted-name order.
pub fn cluster_diseases(
    raw_names: &[String],
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<CanonicalDiseaseMap, BuildError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for n in raw_names {
        let n = n.trim();
        if !n.is_empty() {
            *counts.entry(n.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(BuildError::NoDiseases);
    }
    let names: Vec<String> = counts.keys().cloned().collect();
    let vectors = embedder.embed(&names)?;
    let n = names.len();

    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - vectors[i].cosine(&vectors[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            for b in a + 1..n {
                if members[b].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, d)| dist[a][b] < d) {
                    best = Some((a, b, dist[a][b]));
                }
            }
        }
        let Some((a, b, d)) = best else { break };
        if d > threshold {
            break;
        }
        let absorbed = members[b].take().expect("active cluster");
        let (wa, wb) = (
            members[a].as_ref().expect("active cluster").len() as f64,
            absorbed.len() as f64,
        );
        for c in 0..n {
            if c != a && members[c].is_some() {
                let merged = (wa * dist[a][c] + wb * dist[b][c]) / (wa + wb);
                dist[a][c] = merged;
                dist[c][a] = merged;
            }
        }
        members[a].as_mut().expect("active cluster").extend(absorbed);
    }

    Ok(CanonicalDiseaseMap::from_clusters(members.into_iter().flatten().map(
        |idx| {
            idx.into_iter()
                .map(|i| (names[i].clone(), counts[&names[i]]))
                .collect()
        },
    )))
}
