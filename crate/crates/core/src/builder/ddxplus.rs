//! Converts DDXPlus patient rows into [`EhrRecord`]s.
//!
//! A DDXPlus release ships patient CSVs with the columns `AGE`, `SEX`,
//! `PATHOLOGY`, `EVIDENCES` (a Python-style list such as
//! `['E_48', 'E_53_@_V_44']`) and `INITIAL_EVIDENCE`, plus an evidence
//! dictionary (`release_evidences.json`) mapping codes to questions and value
//! meanings. Symptoms become the manifestation text; antecedents and
//! socio-demographics go into `demographics`.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{BuildError, EhrRecord};

#[derive(Debug, Clone, Deserialize)]
pub struct Evidence {
    pub name: String,
    #[serde(default)]
    pub question_en: String,
    #[serde(default)]
    pub is_antecedent: bool,
    #[serde(default)]
    pub value_meaning: HashMap<String, ValueMeaning>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ValueMeaning {
    #[serde(default)]
    pub en: String,
}

pub type EvidenceTable = HashMap<String, Evidence>;

pub fn load_evidences(path: impl AsRef<Path>) -> Result<EvidenceTable, BuildError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| BuildError::Corpus {
        line: 0,
        message: format!("evidence dictionary: {e}"),
    })
}

#[derive(Debug, Deserialize)]
struct Row {
    #[serde(rename = "AGE")]
    age: String,
    #[serde(rename = "SEX")]
    sex: String,
    #[serde(rename = "PATHOLOGY")]
    pathology: String,
    #[serde(rename = "EVIDENCES")]
    evidences: String,
}

const QUESTION_PREFIXES: &[&str] = &[
    "do you have ",
    "have you ",
    "are you ",
    "did you ",
    "do you ",
    "is your ",
    "does your ",
    "is the ",
];

/// Turns an evidence question into a manifestation phrase.
fn phrase(evidence: Option<&Evidence>, code: &str, value: Option<&str>) -> String {
    let Some(ev) = evidence else {
        return match value {
            Some(v) => format!("{code}: {v}"),
            None => code.to_string(),
        };
    };
    let mut q = ev.question_en.trim().trim_end_matches('?').trim().to_string();
    let lower = q.to_lowercase();
    if let Some(p) = QUESTION_PREFIXES.iter().find(|p| lower.starts_with(*p)) {
        q = q[p.len()..].to_string();
    }
    if q.is_empty() {
        q = ev.name.clone();
    }
    match value {
        Some(v) => {
            let meaning = ev
                .value_meaning
                .get(v)
                .map(|m| m.en.trim())
                .filter(|m| !m.is_empty() && *m != "NA")
                .unwrap_or(v);
            format!("{q}: {meaning}")
        }
        None => q,
    }
}

fn parse_evidence_list(raw: &str) -> Vec<(String, Option<String>)> {
    raw.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').trim())
        .filter(|s| !s.is_empty())
        .map(|s| match s.split_once("_@_") {
            Some((code, v)) => (code.to_string(), Some(v.to_string())),
            None => (s.to_string(), None),
        })
        .collect()
}

/// Converts patient rows. With `per_pathology = Some(n)`, at most `n` rows per
/// pathology are kept, sampled with a ChaCha8 generator seeded by `seed`;
/// output preserves the original row order.
pub fn convert(
    csv_source: impl Read,
    evidences: &EvidenceTable,
    per_pathology: Option<usize>,
    seed: u64,
) -> Result<Vec<EhrRecord>, BuildError> {
    let mut reader = csv::Reader::from_reader(csv_source);
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| BuildError::Corpus {
            line: i + 2,
            message: e.to_string(),
        })?;
        rows.push((i, row));
    }

    let keep: Vec<usize> = match per_pathology {
        None => (0..rows.len()).collect(),
        Some(n) => {
            let mut by_pathology: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in &rows {
                by_pathology.entry(r.pathology.as_str()).or_default().push(*i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = Vec::new();
            for (_, mut idx) in by_pathology {
                idx.shuffle(&mut rng);
                idx.truncate(n);
                keep.extend(idx);
            }
            keep.sort_unstable();
            keep
        }
    };

    let mut out = Vec::with_capacity(keep.len());
    for i in keep {
        let row = &rows[i].1;
        let mut symptoms = Vec::new();
        let mut antecedents = Vec::new();
        for (code, value) in parse_evidence_list(&row.evidences) {
            let ev = evidences.get(&code);
            let text = phrase(ev, &code, value.as_deref());
            if ev.is_some_and(|e| e.is_antecedent) {
                antecedents.push(text);
            } else {
                symptoms.push(text);
            }
        }
        if symptoms.is_empty() {
            symptoms.push("no reported symptoms".into());
        }
        let mut demographics = BTreeMap::from([
            ("age".to_string(), row.age.clone()),
            ("sex".to_string(), row.sex.clone()),
        ]);
        if !antecedents.is_empty() {
            demographics.insert("antecedents".into(), antecedents.join("; "));
        }
        out.push(EhrRecord {
            record_id: format!("ddx-{i:07}"),
            diagnosis_raw: row.pathology.clone(),
            manifestation_text: symptoms.join("; "),
            treatment_text: None,
            demographics: Some(demographics),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn evidences() -> EvidenceTable {
        serde_json::from_str(
            r#"{
            "E_91": {"name": "E_91", "question_en": "Do you have a fever (either felt or measured with a thermometer)?", "is_antecedent": false, "value_meaning": {}},
            "E_55": {"name": "E_55", "question_en": "Do you feel pain somewhere?", "is_antecedent": false,
                     "value_meaning": {"V_101": {"en": "forehead"}}},
            "E_204": {"name": "E_204", "question_en": "Have you traveled out of the country in the last 4 weeks?", "is_antecedent": true, "value_meaning": {"V_10": {"en": "N"}}}
        }"#,
        )
        .unwrap()
    }

    const CSV: &str = "AGE,DIFFERENTIAL_DIAGNOSIS,SEX,PATHOLOGY,EVIDENCES,INITIAL_EVIDENCE\n\
        49,\"[]\",F,URTI,\"['E_91', 'E_55_@_V_101', 'E_204_@_V_10']\",E_91\n\
        30,\"[]\",M,Influenza,\"['E_91']\",E_91\n\
        31,\"[]\",M,Influenza,\"['E_91']\",E_91\n\
        32,\"[]\",M,Influenza,\"['E_91']\",E_91\n";

    #[test]
    fn converts_rows() {
        let recs = convert(CSV.as_bytes(), &evidences(), None, 42).unwrap();
        assert_eq!(recs.len(), 4);
        let r = &recs[0];
        assert_eq!(r.diagnosis_raw, "URTI");
        assert_eq!(
            r.manifestation_text,
            "a fever (either felt or measured with a thermometer); feel pain somewhere: forehead"
        );
        let demo = r.demographics.as_ref().unwrap();
        assert_eq!(demo["age"], "49");
        assert!(demo["antecedents"].starts_with("traveled out of the country"));
    }

    #[test]
    fn samples_per_pathology_deterministically() {
        let a = convert(CSV.as_bytes(), &evidences(), Some(2), 42).unwrap();
        let b = convert(CSV.as_bytes(), &evidences(), Some(2), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().filter(|r| r.diagnosis_raw == "Influenza").count(), 2);
    }
}
