#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use kgdx_core::builder::{
    augment_manifestations, build_disease_kg, CanonicalDiseaseMap, EhrRecord, HierarchyAssignment,
};
use kgdx_core::engine::{Engine, EngineConfig};
use kgdx_core::eval::EvalCase;
use kgdx_core::llm::{ChatBackend, FnChat, LlmError, MockEmbedder};
use kgdx_core::retriever::{ingest, DocumentIndex};
use kgdx_core::template::PromptTemplates;
use kgdx_core::text::classify_feature;
use kgdx_core::{DiagnosticKg, Embedder, KgEdge, Level, NodeId, Relation};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random valid graph with at most 51 nodes.
pub fn random_kg(seed: u64) -> DiagnosticKg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = rng.random_range(1..=3);
    let n2 = rng.random_range(1..=6);
    let n3 = rng.random_range(1..=12);
    let n4d = rng.random_range(1..=20);
    let n4a = rng.random_range(0..=10);
    let mut kg = DiagnosticKg::new();
    let l1: Vec<NodeId> = (0..n1).map(|i| kg.ensure_node(Level::L1, &format!("cat {i}"), None)).collect();
    let mut l2 = Vec::new();
    for i in 0..n2 {
        let id = kg.ensure_node(Level::L2, &format!("sub {i}"), None);
        let parent = l1[rng.random_range(0..n1)].clone();
        kg.add_edge(KgEdge::new(id.clone(), parent, Relation::IsA)).unwrap();
        l2.push(id);
    }
    let mut l3 = Vec::new();
    for i in 0..n3 {
        let id = kg.ensure_node(Level::L3, &format!("disease {i}"), None);
        let parent = l2[rng.random_range(0..n2)].clone();
        kg.add_edge(KgEdge::new(id.clone(), parent, Relation::IsA)).unwrap();
        l3.push(id);
    }
    for (level, n, stem) in [(Level::L4d, n4d, "feature"), (Level::L4a, n4a, "augmented")] {
        for i in 0..n {
            let label = format!("{stem} {i}");
            let id = kg.ensure_node(level, &label, Some(classify_feature(&label)));
            let fan = rng.random_range(1..=3.min(n3));
            for d in l3.choose_multiple(&mut rng, fan) {
                kg.add_edge(KgEdge::new(d.clone(), id.clone(), Relation::HasManifestationOf))
                    .unwrap();
            }
        }
    }
    assert!(kg.validate().is_empty());
    kg
}

/// Non-empty random subset of the decomposed features.
pub fn random_matched(kg: &DiagnosticKg, rng: &mut impl Rng) -> BTreeSet<NodeId> {
    let all: Vec<NodeId> = kg.nodes_at(Level::L4d).map(|n| n.id.clone()).collect();
    let size = rng.random_range(1..=all.len());
    all.choose_multiple(rng, size).cloned().collect()
}

/// Same graph with every label renamed by a random permutation within its
/// level. Returns the old → new id map.
pub fn relabel(kg: &DiagnosticKg, seed: u64) -> (DiagnosticKg, BTreeMap<NodeId, NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    let mut out = DiagnosticKg::new();
    for level in [Level::L1, Level::L2, Level::L3, Level::L4d, Level::L4a] {
        let nodes: Vec<_> = kg.nodes_at(level).cloned().collect();
        let mut perm: Vec<usize> = (0..nodes.len()).collect();
        perm.shuffle(&mut rng);
        for (node, p) in nodes.iter().zip(perm) {
            let id = out.ensure_node(level, &format!("renamed {} {p}", level.as_str()), node.feature_kind);
            map.insert(node.id.clone(), id);
        }
    }
    for e in kg.edges() {
        out.add_edge(KgEdge::new(map[&e.src].clone(), map[&e.dst].clone(), e.relation))
            .unwrap();
    }
    (out, map)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Independent election: BFS outward from every subcategory over an
/// undirected adjacency list built from the raw edge list, then an integer
/// tally scaled by lcm(1..=#subcategories).
pub struct OracleVote {
    pub winner: String,
    pub scaled: BTreeMap<String, u128>,
    pub scale: u128,
}

pub fn oracle_vote(kg: &DiagnosticKg, matched: &BTreeSet<NodeId>) -> Option<OracleVote> {
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in kg.edges() {
        adj.entry(e.src.as_str()).or_default().push(e.dst.as_str());
        adj.entry(e.dst.as_str()).or_default().push(e.src.as_str());
    }
    let subcats: Vec<&str> = kg.nodes().filter(|n| n.level == Level::L2).map(|n| n.id.as_str()).collect();
    let dist: Vec<HashMap<&str, u64>> = subcats
        .iter()
        .map(|s| {
            let mut d = HashMap::from([(*s, 0u64)]);
            let mut q = VecDeque::from([*s]);
            while let Some(u) = q.pop_front() {
                for v in adj.get(u).into_iter().flatten() {
                    if !d.contains_key(v) {
                        d.insert(*v, d[u] + 1);
                        q.push_back(*v);
                    }
                }
            }
            d
        })
        .collect();
    let scale = (1..=subcats.len() as u128).fold(1, |acc, x| acc / gcd(acc, x) * x);
    let mut scaled: BTreeMap<String, u128> = BTreeMap::new();
    let mut sums: Vec<Option<u64>> = vec![Some(0); subcats.len()];
    for t in matched {
        let ds: Vec<Option<u64>> = dist.iter().map(|d| d.get(t.as_str()).copied()).collect();
        let best = ds.iter().flatten().min().copied()?;
        let ties: Vec<usize> = (0..subcats.len()).filter(|&i| ds[i] == Some(best)).collect();
        for &i in &ties {
            *scaled.entry(subcats[i].to_string()).or_default() += scale / ties.len() as u128;
        }
        for (sum, d) in sums.iter_mut().zip(&ds) {
            *sum = match (*sum, d) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
        }
    }
    let mut best: Option<(u128, u64, &str)> = None;
    for (i, s) in subcats.iter().enumerate() {
        let Some(&v) = scaled.get(*s) else { continue };
        let d = sums[i].unwrap_or(u64::MAX);
        let better = match best {
            None => true,
            Some((bv, bd, bs)) => v > bv || (v == bv && (d < bd || (d == bd && *s < bs))),
        };
        if better {
            best = Some((v, d, s));
        }
    }
    Some(OracleVote {
        winner: best?.2.to_string(),
        scaled,
        scale,
    })
}

/// Two hops over the raw edge list: `d is_a subcat` and `d has_manifestation_of f`
/// with `f` augmented.
pub fn oracle_differences(kg: &DiagnosticKg, subcat: &str) -> BTreeSet<(String, String)> {
    let level: HashMap<&str, Level> = kg.nodes().map(|n| (n.id.as_str(), n.level)).collect();
    let diseases: BTreeSet<&str> = kg
        .edges()
        .filter(|e| e.relation == Relation::IsA && e.dst.as_str() == subcat && level[e.src.as_str()] == Level::L3)
        .map(|e| e.src.as_str())
        .collect();
    kg.edges()
        .filter(|e| {
            e.relation == Relation::HasManifestationOf
                && diseases.contains(e.src.as_str())
                && level[e.dst.as_str()] == Level::L4a
        })
        .map(|e| (e.src.to_string(), e.dst.to_string()))
        .collect()
}

/// `(n - 1) / deg` recomputed from the raw node and edge lists.
pub fn oracle_score(kg: &DiagnosticKg, node: &str) -> f64 {
    let n = kg.nodes().filter(|x| x.level == Level::L4d).count();
    let deg = kg
        .edges()
        .filter(|e| e.relation == Relation::HasManifestationOf && e.dst.as_str() == node)
        .count();
    (n as f64 - 1.0) / deg as f64
}

// Synthetic world for the masking and ablation experiments.

pub const WORLD_DIM: usize = 128;
const NAMES: [&str; 5] = ["amber", "birch", "cedar", "delta", "ember"];
const DISEASES_PER_SUB: usize = 4;
const RECORDS_PER_DISEASE: usize = 3;

pub struct World {
    pub kg: DiagnosticKg,
    pub corpus: Vec<EhrRecord>,
    pub cases: Vec<EvalCase>,
    pub embedder: Arc<MockEmbedder>,
    pub index: DocumentIndex,
    /// Distinctive feature label → (category, subcategory, disease).
    pub answers: BTreeMap<String, (String, String, String)>,
}

pub fn category_of(sub: usize) -> &'static str {
    if sub < 3 {
        "category alpha"
    } else {
        "category beta"
    }
}

pub fn subcategory(sub: usize) -> String {
    format!("subcategory {}", NAMES[sub])
}

pub fn disease(sub: usize, j: usize) -> String {
    format!("{} disorder {j}", NAMES[sub])
}

pub fn common_feature(sub: usize) -> String {
    format!("dull ache around the {} zone", NAMES[sub])
}

pub fn distinctive_feature(sub: usize, j: usize) -> String {
    format!("{} marker {j} present", NAMES[sub])
}

pub fn context_feature(sub: usize) -> String {
    format!("exposure history {}", NAMES[sub])
}

/// Five subcategories of four diseases. Every record lists its
/// subcategory's shared feature and its disease's distinctive feature. Case
/// queries add an unmatched context feature whose embedding equals the
/// record vectors of the same subcategory, so retrieval alone still finds
/// the right neighbourhood.
pub fn world(n_cases: usize) -> World {
    let base = MockEmbedder::new(WORLD_DIM);
    let mut embedder = MockEmbedder::new(WORLD_DIM);
    let mut corpus = Vec::new();
    let mut hierarchy = HierarchyAssignment::default();
    let mut answers = BTreeMap::new();
    for s in 0..NAMES.len() {
        hierarchy
            .subcategory_to_category
            .insert(subcategory(s), category_of(s).to_string());
        let ctx = base.embed_one(&context_feature(s)).unwrap();
        for j in 0..DISEASES_PER_SUB {
            hierarchy.disease_to_subcategory.insert(disease(s, j), subcategory(s));
            answers.insert(
                distinctive_feature(s, j),
                (category_of(s).to_string(), subcategory(s), disease(s, j)),
            );
            let text = format!("{}; {}", common_feature(s), distinctive_feature(s, j));
            embedder = embedder.with_vector(text.clone(), ctx.values().to_vec()).unwrap();
            for r in 0..RECORDS_PER_DISEASE {
                corpus.push(EhrRecord {
                    record_id: format!("rec-{s}-{j}-{r}"),
                    diagnosis_raw: disease(s, j),
                    manifestation_text: text.clone(),
                    treatment_text: Some("rest and review".into()),
                    demographics: None,
                });
            }
        }
    }
    let canonical = CanonicalDiseaseMap::identity(corpus.iter().map(|r| r.diagnosis_raw.as_str()));
    let kg = build_disease_kg(&corpus, &canonical, &hierarchy).unwrap();
    let augmenter = FnChat(|_: &str, user: &str| {
        let d = user
            .lines()
            .find_map(|l| l.strip_prefix("Disease: "))
            .unwrap_or("unknown")
            .trim()
            .to_string();
        Ok(format!("[\"{d} hallmark\"]"))
    });
    let (kg, _) = augment_manifestations(&kg, &augmenter, &PromptTemplates::default()).unwrap();
    let cases = (0..n_cases)
        .map(|i| {
            let d = i % (NAMES.len() * DISEASES_PER_SUB);
            let (s, j) = (d / DISEASES_PER_SUB, d % DISEASES_PER_SUB);
            EvalCase {
                record_id: format!("case-{i:03}"),
                query_text: format!("{}; {}; {}", common_feature(s), distinctive_feature(s, j), context_feature(s)),
                gold_l3: disease(s, j),
            }
        })
        .collect();
    let embedder = Arc::new(embedder);
    let index = ingest(&corpus, embedder.as_ref(), Some(&canonical)).unwrap();
    World {
        kg,
        corpus,
        cases,
        embedder,
        index,
        answers,
    }
}

/// Text between the patient-manifestation heading and the next heading.
pub fn patient_block(user: &str) -> &str {
    let start = user
        .find("### Patient manifestations\n")
        .map_or(0, |i| i + "### Patient manifestations\n".len());
    let rest = &user[start..];
    rest.find("\n### ").map_or(rest, |end| &rest[..end])
}

pub fn report_json(l1: &str, l2: &str, l3: &str) -> String {
    format!(
        "```json\n{{\"diagnosis_l1\": \"{l1}\", \"diagnosis_l2\": \"{l2}\", \"diagnosis_l3\": \"{l3}\", \"reasoning\": \"oracle\", \"treatments\": [], \"medications\": []}}\n```"
    )
}

/// Answers with the disease whose distinctive feature appears among the
/// patient's manifestations, and with an unknown disease otherwise.
pub fn oracle_chat(answers: BTreeMap<String, (String, String, String)>) -> impl ChatBackend {
    FnChat(move |_: &str, user: &str| -> Result<String, LlmError> {
        let block = patient_block(user);
        Ok(answers
            .iter()
            .find(|(label, _)| block.contains(label.as_str()))
            .map(|(_, (l1, l2, l3))| report_json(l1, l2, l3))
            .unwrap_or_else(|| report_json("unknown", "unknown", "undetermined")))
    })
}

pub fn world_engine(w: &World, chat: Arc<dyn ChatBackend>) -> Engine {
    let mut config = EngineConfig::default();
    config.questioning.llm_phrasing = false;
    Engine::new(
        Arc::new(w.kg.clone()),
        Arc::new(w.index.clone()),
        chat,
        w.embedder.clone(),
        PromptTemplates::default(),
        config,
    )
    .unwrap()
}

/// Offline stand-in for every prompt the pipeline sends: topic proposals,
/// augmentation lists and diagnoses (through [`oracle_chat`]).
pub fn scripted_chat(answers: BTreeMap<String, (String, String, String)>) -> impl ChatBackend {
    let diagnose = oracle_chat(answers);
    FnChat(move |system: &str, user: &str| -> Result<String, LlmError> {
        if let Some(items) = user.lines().find_map(|l| l.strip_prefix("Diseases: ")) {
            let mut topics: Vec<String> = Vec::new();
            for item in items.split(", ") {
                let t = format!("{} group", item.split_whitespace().next().unwrap_or("misc"));
                if !topics.contains(&t) {
                    topics.push(t);
                }
            }
            return Ok(serde_json::to_string(&topics).unwrap());
        }
        if let Some(d) = user.lines().find_map(|l| l.strip_prefix("Disease: ")) {
            return Ok(format!("[\"{} hallmark\"]", d.trim()));
        }
        diagnose.chat(system, user)
    })
}
