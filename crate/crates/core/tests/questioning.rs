mod common;

use std::collections::BTreeSet;

use common::{oracle_score, random_kg, random_matched};
use kgdx_core::fixtures::toy_kg;
use kgdx_core::llm::{FnChat, LlmError, MockEmbedder};
use kgdx_core::matcher::PatientQuery;
use kgdx_core::questioning::{
    generate_questions, mask_features, phrase_question, prune_query, select_question_features,
    select_question_features_excluding, MaskingConfig,
};
use kgdx_core::template::PromptTemplates;
use kgdx_core::{DiagnosticKg, Embedder, Level, NodeId, Relation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Decomposed features of diseases under `subcat`, from the raw edge list.
fn features_under(kg: &DiagnosticKg, subcat: &str) -> BTreeSet<NodeId> {
    let diseases: BTreeSet<&NodeId> = kg
        .edges()
        .filter(|e| e.relation == Relation::IsA && e.dst.as_str() == subcat)
        .map(|e| &e.src)
        .collect();
    kg.edges()
        .filter(|e| e.relation == Relation::HasManifestationOf && diseases.contains(&e.src))
        .filter(|e| kg.node(e.dst.as_str()).unwrap().level == Level::L4d)
        .map(|e| e.dst.clone())
        .collect()
}

fn oracle_ranking(kg: &DiagnosticKg, pool: impl IntoIterator<Item = NodeId>) -> Vec<NodeId> {
    let mut scored: Vec<(f64, NodeId)> = pool.into_iter().map(|id| (oracle_score(kg, id.as_str()), id)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn selection_matches_sorted_oracle(seed in any::<u64>(), count in 0usize..8) {
        let kg = random_kg(seed);
        for s in kg.nodes_at(Level::L2) {
            let got = select_question_features(&kg, s.id.as_str(), count).unwrap();
            let want: Vec<NodeId> = oracle_ranking(&kg, features_under(&kg, s.id.as_str())).into_iter().take(count).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn exclusion_removes_only_excluded(seed in any::<u64>()) {
        let kg = random_kg(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skip = random_matched(&kg, &mut rng);
        for s in kg.nodes_at(Level::L2) {
            let got = select_question_features_excluding(&kg, s.id.as_str(), usize::MAX, &skip).unwrap();
            let full = select_question_features(&kg, s.id.as_str(), usize::MAX).unwrap();
            let want: Vec<NodeId> = full.into_iter().filter(|f| !skip.contains(f)).collect();
            prop_assert_eq!(got, want);
        }
    }

    /// Deleted sets grow with the ratio, have ceil(r|M|) members and take the
    /// highest-ranked nodes of M.
    #[test]
    fn masks_are_nested_and_sized(seed in any::<u64>(), ratios in prop::collection::vec(0.0f64..=1.0, 2..6)) {
        let kg = random_kg(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let matched = random_matched(&kg, &mut rng);
        let mut ratios = ratios;
        ratios.sort_by(f64::total_cmp);
        for s in kg.nodes_at(Level::L2) {
            let pool: BTreeSet<NodeId> = matched.intersection(&features_under(&kg, s.id.as_str())).cloned().collect();
            let ranked = oracle_ranking(&kg, pool.iter().cloned());
            let mut previous = BTreeSet::new();
            for &r in &ratios {
                let cfg = MaskingConfig { ratio: r, ..Default::default() };
                let got = mask_features(&kg, s.id.as_str(), &matched, &cfg).unwrap();
                let size = (r * pool.len() as f64 - 1e-9).ceil().max(0.0) as usize;
                let want: BTreeSet<NodeId> = ranked.iter().take(size).cloned().collect();
                prop_assert_eq!(&got, &want);
                prop_assert!(previous.is_subset(&got));
                previous = got;
            }
        }
    }
}

#[test]
fn toy_selection_and_phrasing() {
    let kg = toy_kg();
    let top = select_question_features(&kg, "L2:lumbar_pain", 2).unwrap();
    assert_eq!(top, [NodeId::from("L4d:morning_stiffness"), NodeId::from("L4d:pain_worsens_while_walking")]);
    let all = select_question_features(&kg, "L2:lumbar_pain", 10).unwrap();
    assert_eq!(all.last().unwrap().as_str(), "L4d:pain_located_in_lumbar_region");

    assert_eq!(phrase_question("pain worsens while walking"), "Does the pain worsen while walking?");
    assert_eq!(phrase_question("pain located in lumbar region"), "Is the pain located in lumbar region?");
    assert_eq!(phrase_question("morning stiffness"), "Do you have morning stiffness?");
}

#[test]
fn llm_phrasing_is_validated() {
    let kg = toy_kg();
    let t = PromptTemplates::default();
    let ids = [NodeId::from("L4d:morning_stiffness"), NodeId::from("L4d:shooting_pain_down_leg")];
    let good = FnChat(|_: &str, _: &str| Ok("Are you stiff in the mornings?".to_string()));
    let qs = generate_questions(&ids, &kg, Some(&good), &t).unwrap();
    assert!(qs.iter().all(|q| q.text == "Are you stiff in the mornings?"));

    for bad in ["{\"q\": \"x?\"}", "Line one?\nLine two?", "No question mark", ""] {
        let chat = FnChat(move |_: &str, _: &str| Ok(bad.to_string()));
        let qs = generate_questions(&ids, &kg, Some(&chat), &t).unwrap();
        assert_eq!(qs[0].text, "Do you have morning stiffness?");
    }
    let failing = FnChat(|_: &str, _: &str| -> Result<String, LlmError> { Err(LlmError::EmptyInput) });
    let qs = generate_questions(&ids, &kg, Some(&failing), &t).unwrap();
    assert_eq!(qs[1].text, "Do you have shooting pain down leg?");
}

/// Pruning keeps exactly the features whose similarity to every deleted
/// label is at most the threshold.
#[test]
fn pruning_matches_brute_force() {
    let kg = toy_kg();
    let emb = MockEmbedder::new(16);
    let texts = [
        "pain worsens while walking; morning stiffness; something unrelated",
        "pain located in lumbar region; shooting pain down leg",
        "neck stiffness",
    ];
    let all: Vec<NodeId> = kg.nodes_at(Level::L4d).map(|n| n.id.clone()).collect();
    for text in texts {
        let query = PatientQuery::from_text(text, &emb).unwrap();
        for mask in 0u32..(1 << all.len()) {
            let deleted: BTreeSet<NodeId> =
                (0..all.len()).filter(|i| mask & (1 << i) != 0).map(|i| all[i].clone()).collect();
            for t in [0.0, 0.3, 0.6, 0.99] {
                let got = prune_query(&query, &deleted, &kg, &emb, t).unwrap();
                let label_vecs: Vec<_> = deleted
                    .iter()
                    .map(|d| emb.embed_one(&kg.node(d.as_str()).unwrap().label).unwrap())
                    .collect();
                let kept: Vec<String> = query
                    .features
                    .iter()
                    .zip(&query.feature_embeddings)
                    .filter(|(_, fv)| {
                        label_vecs
                            .iter()
                            .all(|lv| fv.values().iter().zip(lv.values()).map(|(a, b)| a * b).sum::<f64>() <= t)
                    })
                    .map(|(f, _)| f.clone())
                    .collect();
                assert_eq!(got.features, kept, "{text} / {deleted:?} / {t}");
                let raw = if kept.len() == query.features.len() { query.raw_text.clone() } else { kept.join("; ") };
                assert_eq!(got.raw_text, raw);
            }
        }
    }
}

#[test]
fn masking_config_bounds() {
    let kg = toy_kg();
    let m = BTreeSet::from([NodeId::from("L4d:morning_stiffness")]);
    for bad in [
        MaskingConfig { ratio: -0.1, ..Default::default() },
        MaskingConfig { ratio: 1.1, ..Default::default() },
        MaskingConfig { ratio: 0.5, sentence_threshold: 1.0 },
    ] {
        assert!(mask_features(&kg, "L2:lumbar_pain", &m, &bad).is_err());
    }
    let none = mask_features(&kg, "L2:neck_pain", &m, &MaskingConfig { ratio: 1.0, ..Default::default() }).unwrap();
    assert!(none.is_empty());
}
