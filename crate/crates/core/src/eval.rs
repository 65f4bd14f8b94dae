//! Accuracy at each hierarchy level, the feature-masking experiment and the
//! retrieval/graph ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{disease_label, CanonicalDiseaseMap, EhrRecord};
use crate::engine::{DiagnoseOptions, Diagnosis, DiagnosisReport, Engine, EngineError, LegMode};
use crate::kg::{DiagnosticKg, Level, NodeId};
use crate::questioning::{mask_features, prune_query, MaskingConfig};
use crate::text::normalize_label;

pub const DEFAULT_SEED: u64 = 42;
pub const TABLE_RATIOS: [f64; 4] = [1.0, 0.666, 0.333, 0.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {cases} cases")]
    LengthMismatch { predictions: usize, cases: usize },
    #[error("gold label `{0}` resolves neither in the graph nor in the alias table")]
    UnresolvableGold(String),
    #[error("masking ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("line {line}: {message}")]
    Cases { line: usize, message: String },
    #[error("malformed alias table: {0}")]
    Aliases(serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub record_id: String,
    pub query_text: String,
    pub gold_l3: String,
}

/// Gold label → diseases that count as a correct prediction for it.
pub type AliasTable = BTreeMap<String, Vec<String>>;

pub fn load_aliases(path: impl AsRef<Path>) -> Result<AliasTable, EvalError> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(EvalError::Aliases)
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<EvalCase>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Cases {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One case per record, the gold label being its canonical disease.
pub fn cases_from_corpus(corpus: &[EhrRecord], canonical: &CanonicalDiseaseMap) -> Vec<EvalCase> {
    corpus
        .iter()
        .map(|r| EvalCase {
            record_id: r.record_id.clone(),
            query_text: r.manifestation_text.clone(),
            gold_l3: disease_label(r, canonical),
        })
        .collect()
}

/// Normalized gold labels at every level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabels {
    pub l1: Option<String>,
    pub l2: Option<String>,
    pub l3: String,
    /// Diseases also accepted at the disease level.
    pub accepted_l3: BTreeSet<String>,
}

fn label(kg: &DiagnosticKg, id: &NodeId) -> String {
    normalize_label(&kg.node(id.as_str()).expect("ancestor exists").label)
}

/// Derives L2/L1 gold labels from the graph. A label absent from the graph
/// may name a group in `aliases`; its parents are derived when all members
/// share them.
pub fn resolve_gold(case: &EvalCase, kg: &DiagnosticKg, aliases: &AliasTable) -> Result<GoldLabels, EvalError> {
    let l3 = normalize_label(&case.gold_l3);
    if let Some(node) = kg.find_by_label(Level::L3, &l3) {
        let (l2, l1) = kg
            .ancestors(node.id.as_str())
            .map_err(|_| EvalError::UnresolvableGold(case.gold_l3.clone()))?;
        return Ok(GoldLabels {
            l1: Some(label(kg, &l1)),
            l2: Some(label(kg, &l2)),
            accepted_l3: BTreeSet::from([l3.clone()]),
            l3,
        });
    }
    let members = aliases
        .iter()
        .find(|(k, _)| normalize_label(k) == l3)
        .map(|(_, v)| v)
        .ok_or_else(|| EvalError::UnresolvableGold(case.gold_l3.clone()))?;
    let mut parents = BTreeSet::new();
    for m in members {
        if let Some(node) = kg.find_by_label(Level::L3, m) {
            if let Ok(p) = kg.ancestors(node.id.as_str()) {
                parents.insert(p);
            }
        }
    }
    let (l2, l1) = match parents.len() {
        1 => {
            let (l2, l1) = parents.into_iter().next().expect("one entry");
            (Some(label(kg, &l2)), Some(label(kg, &l1)))
        }
        _ => (None, None),
    };
    let mut accepted: BTreeSet<String> = members.iter().map(|m| normalize_label(m)).collect();
    accepted.insert(l3.clone());
    Ok(GoldLabels {
        l1,
        l2,
        l3,
        accepted_l3: accepted,
    })
}

fn is_correct(pred: Option<&DiagnosisReport>, gold: &GoldLabels, level: Level) -> bool {
    let Some(report) = pred.filter(|r| !r.off_graph) else {
        return false;
    };
    let Some(p) = report.label(level).map(normalize_label) else {
        return false;
    };
    match level {
        Level::L3 => gold.accepted_l3.contains(&p),
        Level::L2 => gold.l2.as_ref() == Some(&p),
        Level::L1 => gold.l1.as_ref() == Some(&p),
        _ => false,
    }
}

/// Fraction of cases whose prediction matches the gold label at `level`.
/// Missing and off-graph predictions are wrong.
pub fn level_accuracy(
    predictions: &[Option<DiagnosisReport>],
    golds: &[GoldLabels],
    level: Level,
) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            cases: golds.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| is_correct(p.as_ref(), g, level))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LevelScores {
    pub fn compute(predictions: &[Option<DiagnosisReport>], golds: &[GoldLabels]) -> Result<Self, EvalError> {
        Ok(LevelScores {
            l1: level_accuracy(predictions, golds, Level::L1)?,
            l2: level_accuracy(predictions, golds, Level::L2)?,
            l3: level_accuracy(predictions, golds, Level::L3)?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseOutcome {
    pub record_id: String,
    pub report: Option<DiagnosisReport>,
    pub error: Option<String>,
    /// Full pipeline output of the final diagnosis.
    #[serde(skip)]
    pub diagnosis: Option<Diagnosis>,
}

impl CaseOutcome {
    fn from_result(record_id: &str, result: Result<Diagnosis, EngineError>) -> Self {
        match result {
            Ok(d) => CaseOutcome {
                record_id: record_id.to_string(),
                report: Some(d.report.clone()),
                error: None,
                diagnosis: Some(d),
            },
            Err(e) => CaseOutcome {
                record_id: record_id.to_string(),
                report: None,
                error: Some(e.to_string()),
                diagnosis: None,
            },
        }
    }
}

fn resolve_all(cases: &[EvalCase], kg: &DiagnosticKg, aliases: &AliasTable) -> Result<Vec<GoldLabels>, EvalError> {
    cases.iter().map(|c| resolve_gold(c, kg, aliases)).collect()
}

fn score(outcomes: &[CaseOutcome], golds: &[GoldLabels]) -> Result<LevelScores, EvalError> {
    let preds: Vec<Option<DiagnosisReport>> = outcomes.iter().map(|o| o.report.clone()).collect();
    LevelScores::compute(&preds, golds)
}

fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Options every eval run uses for case `i`: the case's own record is never
/// retrieved.
pub fn case_options(case: &EvalCase, i: usize, seed: u64) -> DiagnoseOptions {
    DiagnoseOptions {
        exclude_record: Some(case.record_id.clone()),
        seed: case_seed(seed, i),
        ..Default::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskingRow {
    pub ratio: f64,
    pub scores: LevelScores,
    pub errors: usize,
    /// Cases where at least one deleted feature came back through a question.
    pub restored_cases: usize,
    pub deleted_features: usize,
    #[serde(skip)]
    pub outcomes: Vec<CaseOutcome>,
    #[serde(skip)]
    pub deleted: Vec<BTreeSet<NodeId>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskingReport {
    pub restore: bool,
    pub sentence_threshold: f64,
    pub cases: usize,
    pub rows: Vec<MaskingRow>,
}

struct MaskedCase {
    outcome: CaseOutcome,
    deleted: BTreeSet<NodeId>,
    restored: bool,
}

fn masked_case(
    engine: &Engine,
    case: &EvalCase,
    opts: &DiagnoseOptions,
    cfg: &MaskingConfig,
    restore: bool,
) -> Result<(Diagnosis, BTreeSet<NodeId>, bool), EngineError> {
    let kg = engine.kg();
    let query = engine.query(&case.query_text)?;
    let (matches, vote) = engine.analyze(&query)?;
    let deleted = match vote {
        Some(v) => mask_features(kg, v.winner.as_str(), &matches.matched, cfg)?,
        None => BTreeSet::new(),
    };
    let pruned = prune_query(&query, &deleted, kg, engine.embedder(), cfg.sentence_threshold)?;
    let first = engine.diagnose_query(&pruned, opts)?;
    if !restore {
        return Ok((first, deleted, false));
    }
    let mut restored = pruned.clone();
    for q in &first.report.follow_up_questions {
        if !deleted.contains(&q.node_id) {
            continue;
        }
        let node = kg.node(q.node_id.as_str()).expect("question nodes exist");
        if !restored.features.contains(&node.label) {
            let e = engine.embedder().embed_one(&node.label)?;
            restored.push_feature(&node.label, e);
        }
    }
    if restored.features.len() == pruned.features.len() {
        return Ok((first, deleted, false));
    }
    Ok((engine.diagnose_query(&restored, opts)?, deleted, true))
}

/// For each ratio: delete the top-scoring matched features, prune the
/// query, diagnose, and (with `restore`) add back every deleted feature the
/// follow-up questions asked about before diagnosing again.
pub fn run_masking_experiment(
    engine: &Engine,
    cases: &[EvalCase],
    aliases: &AliasTable,
    ratios: &[f64],
    restore: bool,
    seed: u64,
) -> Result<MaskingReport, EvalError> {
    let golds = resolve_all(cases, engine.kg(), aliases)?;
    let threshold = engine.config().questioning.mask.sentence_threshold;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(EvalError::InvalidRatio(ratio));
        }
        let cfg = MaskingConfig {
            ratio,
            sentence_threshold: threshold,
        };
        let results: Vec<MaskedCase> = cases
            .par_iter()
            .enumerate()
            .map(|(i, case)| {
                let opts = case_options(case, i, seed);
                match masked_case(engine, case, &opts, &cfg, restore) {
                    Ok((d, deleted, restored)) => MaskedCase {
                        outcome: CaseOutcome::from_result(&case.record_id, Ok(d)),
                        deleted,
                        restored,
                    },
                    Err(e) => MaskedCase {
                        outcome: CaseOutcome::from_result(&case.record_id, Err(e)),
                        deleted: BTreeSet::new(),
                        restored: false,
                    },
                }
            })
            .collect();
        let outcomes: Vec<CaseOutcome> = results.iter().map(|r| r.outcome.clone()).collect();
        rows.push(MaskingRow {
            ratio,
            scores: score(&outcomes, &golds)?,
            errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
            restored_cases: results.iter().filter(|r| r.restored).count(),
            deleted_features: results.iter().map(|r| r.deleted.len()).sum(),
            deleted: results.into_iter().map(|r| r.deleted).collect(),
            outcomes,
        });
    }
    Ok(MaskingReport {
        restore,
        sentence_threshold: threshold,
        cases: cases.len(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub retriever_mode: LegMode,
    pub kg_mode: LegMode,
}

/// All nine retriever × graph combinations.
pub fn full_grid() -> Vec<AblationConfig> {
    let modes = [LegMode::With, LegMode::Without, LegMode::Random];
    modes
        .iter()
        .flat_map(|&r| {
            modes.iter().map(move |&k| AblationConfig {
                retriever_mode: r,
                kg_mode: k,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub scores: LevelScores,
    pub errors: usize,
    #[serde(skip)]
    pub outcomes: Vec<CaseOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub cases: usize,
    pub rows: Vec<AblationRow>,
}

pub fn run_ablation(
    engine: &Engine,
    cases: &[EvalCase],
    aliases: &AliasTable,
    grid: &[AblationConfig],
    seed: u64,
) -> Result<AblationReport, EvalError> {
    let golds = resolve_all(cases, engine.kg(), aliases)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &config in grid {
        let outcomes: Vec<CaseOutcome> = cases
            .par_iter()
            .enumerate()
            .map(|(i, case)| {
                let opts = DiagnoseOptions {
                    retrieval: config.retriever_mode,
                    kg: config.kg_mode,
                    ..case_options(case, i, seed)
                };
                CaseOutcome::from_result(&case.record_id, engine.diagnose(&case.query_text, &opts))
            })
            .collect();
        rows.push(AblationRow {
            config,
            scores: score(&outcomes, &golds)?,
            errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
            outcomes,
        });
    }
    Ok(AblationReport {
        seed,
        cases: cases.len(),
        rows,
    })
}

fn mode_name(m: LegMode) -> &'static str {
    match m {
        LegMode::With => "with",
        LegMode::Without => "without",
        LegMode::Random => "random",
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

pub fn render_ablation_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Retriever | KG      | L1     | L2     | L3     | Errors |");
    let _ = writeln!(out, "|-----------|---------|--------|--------|--------|--------|");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "| {:<9} | {:<7} | {:>6} | {:>6} | {:>6} | {:>6} |",
            mode_name(r.config.retriever_mode),
            mode_name(r.config.kg_mode),
            pct(r.scores.l1),
            pct(r.scores.l2),
            pct(r.scores.l3),
            r.errors
        );
    }
    out
}

pub fn render_masking_table(report: &MaskingReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Masking ratio | L1     | L2     | L3     |");
    let _ = writeln!(out, "|---------------|--------|--------|--------|");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "| {:>12}% | {:>6} | {:>6} | {:>6} |",
            format!("{:.1}", r.ratio * 100.0),
            pct(r.scores.l1),
            pct(r.scores.l2),
            pct(r.scores.l3)
        );
    }
    out
}

/// Everything one `eval` invocation produced.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub plain: Option<LevelScores>,
    pub ablation: Option<AblationReport>,
    pub masking: Option<MaskingReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.plain {
            let _ = writeln!(out, "Accuracy: L1 {} | L2 {} | L3 {}\n", pct(p.l1), pct(p.l2), pct(p.l3));
        }
        if let Some(a) = &self.ablation {
            let _ = writeln!(out, "Ablation (seed {}, {} cases)", a.seed, a.cases);
            out.push_str(&render_ablation_table(a));
            out.push('\n');
        }
        if let Some(m) = &self.masking {
            let _ = writeln!(
                out,
                "Masking ({} cases, restore {})",
                m.cases,
                if m.restore { "on" } else { "off" }
            );
            out.push_str(&render_masking_table(m));
        }
        out
    }
}

/// Plain diagnosis of every case with retrieval excluding its own record.
pub fn run_plain(
    engine: &Engine,
    cases: &[EvalCase],
    aliases: &AliasTable,
    seed: u64,
) -> Result<(LevelScores, Vec<CaseOutcome>), EvalError> {
    let golds = resolve_all(cases, engine.kg(), aliases)?;
    let outcomes: Vec<CaseOutcome> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| CaseOutcome::from_result(&c.record_id, engine.diagnose(&c.query_text, &case_options(c, i, seed))))
        .collect();
    Ok((score(&outcomes, &golds)?, outcomes))
}
