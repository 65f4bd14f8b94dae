//! The small lumbar/neck pain graph and corpus used by examples, tests and
//! the CLI demo.

use crate::builder::EhrRecord;
use crate::kg::{DiagnosticKg, KgEdge, Level, NodeId, Relation};
use crate::text::classify_feature;

pub const TOY_CATEGORY: &str = "musculoskeletal pain";

/// `(subcategory, diseases)` in the toy hierarchy.
pub const TOY_HIERARCHY: &[(&str, &[&str])] = &[
    (
        "lumbar pain",
        &["lumbar canal stenosis", "sciatica", "lumbar spondylosis"],
    ),
    ("neck pain", &["cervical spondylosis"]),
];

/// `(feature, diseases)` decomposed from the toy corpus.
pub const TOY_DECOMPOSED: &[(&str, &[&str])] = &[
    (
        "pain located in lumbar region",
        &["lumbar canal stenosis", "sciatica", "lumbar spondylosis"],
    ),
    ("pain worsens while walking", &["lumbar canal stenosis"]),
    ("shooting pain down leg", &["sciatica"]),
    ("neck stiffness", &["cervical spondylosis"]),
    ("morning stiffness", &["lumbar spondylosis"]),
];

/// `(disease, feature)` augmented distinguishing manifestations.
pub const TOY_AUGMENTED: &[(&str, &str)] = &[
    ("lumbar canal stenosis", "pain alleviated when sitting"),
    ("sciatica", "pain worsens when sitting"),
    ("lumbar spondylosis", "stiffness or pain in the lower back"),
];

/// Levels L1 to L3 plus the decomposed features.
pub fn toy_disease_kg() -> DiagnosticKg {
    let mut kg = DiagnosticKg::new();
    let l1 = kg.ensure_node(Level::L1, TOY_CATEGORY, None);
    for (sub, diseases) in TOY_HIERARCHY {
        let l2 = kg.ensure_node(Level::L2, sub, None);
        link(&mut kg, &l2, &l1, Relation::IsA);
        for d in *diseases {
            let l3 = kg.ensure_node(Level::L3, d, None);
            link(&mut kg, &l3, &l2, Relation::IsA);
        }
    }
    for (feature, diseases) in TOY_DECOMPOSED {
        let f = kg.ensure_node(Level::L4d, feature, Some(classify_feature(feature)));
        for d in *diseases {
            link(
                &mut kg,
                &NodeId::for_label(Level::L3, d),
                &f,
                Relation::HasManifestationOf,
            );
        }
    }
    kg
}

/// The full four-tier toy graph.
pub fn toy_kg() -> DiagnosticKg {
    let mut kg = toy_disease_kg();
    for (d, feature) in TOY_AUGMENTED {
        let f = kg.ensure_node(Level::L4a, feature, Some(classify_feature(feature)));
        link(
            &mut kg,
            &NodeId::for_label(Level::L3, d),
            &f,
            Relation::HasManifestationOf,
        );
    }
    kg
}

fn link(kg: &mut DiagnosticKg, src: &NodeId, dst: &NodeId, relation: Relation) {
    kg.add_edge(KgEdge::new(src.clone(), dst.clone(), relation))
        .expect("fixture endpoints exist");
}

/// Records whose decomposition yields exactly the toy decomposed features.
pub fn toy_corpus() -> Vec<EhrRecord> {
    let rec = |id: &str, diag: &str, text: &str, treatment: &str| EhrRecord {
        record_id: id.to_string(),
        diagnosis_raw: diag.to_string(),
        manifestation_text: text.to_string(),
        treatment_text: Some(treatment.to_string()),
        demographics: None,
    };
    vec![
        rec(
            "toy-001",
            "lumbar canal stenosis",
            "Pain located in lumbar region; pain worsens while walking.",
            "Physiotherapy, flexion exercises",
        ),
        rec(
            "toy-002",
            "sciatica",
            "Pain located in lumbar region. Shooting pain down leg.",
            "Nerve gliding exercises, NSAIDs",
        ),
        rec(
            "toy-003",
            "lumbar spondylosis",
            "pain located in lumbar region and morning stiffness",
            "Core strengthening, paracetamol",
        ),
        rec(
            "toy-004",
            "cervical spondylosis",
            "Neck stiffness",
            "Neck mobility exercises",
        ),
        rec(
            "toy-005",
            "lumbar canal stenosis",
            "pain worsens while walking",
            "Physiotherapy",
        ),
    ]
}
