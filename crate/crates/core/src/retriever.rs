//! Exact nearest-neighbour index over EHR records.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{disease_label, CanonicalDiseaseMap, EhrRecord};
use crate::llm::{Embedder, Embedding, LlmError};

pub const INDEX_VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("cannot ingest an empty corpus")]
    EmptyCorpus,
    #[error("duplicate record id `{0}`")]
    DuplicateRecord(String),
    #[error("vector dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("vector of record `{record_id}` has norm {norm}, expected 1")]
    Norm { record_id: String, norm: f64 },
    #[error("unsupported index version {0}")]
    Version(u32),
    #[error("malformed index: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub record_id: String,
    pub document_text: String,
    pub vector: Embedding,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentIndex {
    dimension: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    dimension: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedHit {
    pub record_id: String,
    pub document_text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub hits: Vec<RetrievedHit>,
    pub k_requested: usize,
}

/// Text handed to the generator for one record.
pub fn document_text(record: &EhrRecord, diagnosis: &str) -> String {
    format!(
        "diagnosis: {}\nmanifestations: {}\ntreatment: {}",
        diagnosis,
        record.manifestation_text.trim(),
        record.treatment_text.as_deref().unwrap_or("").trim()
    )
}

/// Diagnosis named on the first line of a document built by [`document_text`].
pub fn document_diagnosis(document_text: &str) -> Option<&str> {
    document_text
        .lines()
        .next()?
        .strip_prefix("diagnosis: ")
        .map(str::trim)
}

/// Embeds each record's manifestation text and stores its document text.
/// With a canonical map the document names the canonical disease.
pub fn ingest(
    corpus: &[EhrRecord],
    embedder: &dyn Embedder,
    canonical: Option<&CanonicalDiseaseMap>,
) -> Result<DocumentIndex, RetrieveError> {
    if corpus.is_empty() {
        return Err(RetrieveError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for r in corpus {
        if !seen.insert(r.record_id.as_str()) {
            return Err(RetrieveError::DuplicateRecord(r.record_id.clone()));
        }
    }
    let mut vectors = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|r| r.manifestation_text.clone()).collect();
        vectors.extend(embedder.embed(&texts)?);
    }
    let entries = corpus
        .iter()
        .zip(vectors)
        .map(|(r, vector)| {
            let diagnosis = match canonical {
                Some(map) => disease_label(r, map),
                None => r.diagnosis_raw.trim().to_string(),
            };
            IndexEntry {
                record_id: r.record_id.clone(),
                document_text: document_text(r, &diagnosis),
                vector,
            }
        })
        .collect();
    DocumentIndex::from_entries(entries)
}

fn rank(a: &(f64, usize), b: &(f64, usize), entries: &[IndexEntry]) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| entries[a.1].record_id.cmp(&entries[b.1].record_id))
}

impl DocumentIndex {
    /// Checks dimensions, unit norms and id uniqueness.
    pub fn from_entries(entries: Vec<IndexEntry>) -> Result<Self, RetrieveError> {
        let Some(first) = entries.first() else {
            return Err(RetrieveError::EmptyCorpus);
        };
        let dimension = first.vector.dimension();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.record_id.as_str()) {
                return Err(RetrieveError::DuplicateRecord(e.record_id.clone()));
            }
            if e.vector.dimension() != dimension {
                return Err(RetrieveError::DimensionMismatch {
                    expected: dimension,
                    actual: e.vector.dimension(),
                });
            }
            let norm = e.vector.norm();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(RetrieveError::Norm {
                    record_id: e.record_id.clone(),
                    norm,
                });
            }
        }
        Ok(DocumentIndex { dimension, entries })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, record_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.record_id == record_id)
    }

    fn score(&self, query: &Embedding, i: usize) -> f64 {
        let s: f64 = query
            .values()
            .iter()
            .zip(self.entries[i].vector.values())
            .map(|(a, b)| a * b)
            .sum();
        s.clamp(-1.0, 1.0)
    }

    fn check(&self, query: &Embedding, k: usize) -> Result<(), RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::InvalidK);
        }
        if query.dimension() != self.dimension {
            return Err(RetrieveError::DimensionMismatch {
                expected: self.dimension,
                actual: query.dimension(),
            });
        }
        Ok(())
    }

    fn context(&self, mut scored: Vec<(f64, usize)>, k: usize) -> RetrievedContext {
        scored.sort_by(|a, b| rank(a, b, &self.entries));
        RetrievedContext {
            hits: scored
                .into_iter()
                .map(|(score, i)| RetrievedHit {
                    record_id: self.entries[i].record_id.clone(),
                    document_text: self.entries[i].document_text.clone(),
                    score,
                })
                .collect(),
            k_requested: k,
        }
    }

    /// Exact top-`k` by dot product, descending, ties by record id.
    pub fn retrieve(&self, query: &Embedding, k: usize) -> Result<RetrievedContext, RetrieveError> {
        self.retrieve_excluding(query, k, |_| false)
    }

    /// [`Self::retrieve`] skipping records for which `exclude` holds.
    pub fn retrieve_excluding(
        &self,
        query: &Embedding,
        k: usize,
        exclude: impl Fn(&str) -> bool,
    ) -> Result<RetrievedContext, RetrieveError> {
        self.check(query, k)?;
        let mut scored: Vec<(f64, usize)> = (0..self.entries.len())
            .filter(|&i| !exclude(&self.entries[i].record_id))
            .map(|i| (self.score(query, i), i))
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, |a, b| rank(a, b, &self.entries));
            scored.truncate(k);
        }
        Ok(self.context(scored, k))
    }

    /// `k` documents drawn uniformly without replacement, ordered by score.
    pub fn sample(
        &self,
        query: Option<&Embedding>,
        k: usize,
        rng: &mut impl Rng,
        exclude: impl Fn(&str) -> bool,
    ) -> Result<RetrievedContext, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::InvalidK);
        }
        if let Some(q) = query {
            self.check(q, k)?;
        }
        let pool: Vec<usize> = (0..self.entries.len())
            .filter(|&i| !exclude(&self.entries[i].record_id))
            .collect();
        let picked = sample(rng, pool.len(), k.min(pool.len()));
        let scored = picked
            .into_iter()
            .map(|p| {
                let i = pool[p];
                (query.map_or(0.0, |q| self.score(q, i)), i)
            })
            .collect();
        Ok(self.context(scored, k))
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile {
            version: INDEX_VERSION,
            dimension: self.dimension,
            entries: self.entries.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("index serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, RetrieveError> {
        let file: IndexFile = serde_json::from_str(text)?;
        if file.version != INDEX_VERSION {
            return Err(RetrieveError::Version(file.version));
        }
        let index = Self::from_entries(file.entries)?;
        if index.dimension != file.dimension {
            return Err(RetrieveError::DimensionMismatch {
                expected: file.dimension,
                actual: index.dimension,
            });
        }
        Ok(index)
    }
}

pub fn save_index(index: &DocumentIndex, path: impl AsRef<Path>) -> Result<(), RetrieveError> {
    std::fs::write(path, index.to_json())?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<DocumentIndex, RetrieveError> {
    DocumentIndex::from_json(&std::fs::read_to_string(path)?)
}
