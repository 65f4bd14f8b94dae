//! The diagnosis pipeline and the interactive consultation loop.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{DiagnosticKg, KgError, Level, NodeId};
use crate::llm::{ChatBackend, Embedder, LlmError};
use crate::matcher::{
    extract_differences, match_features, vote_subcategory, DifferenceSet, FeatureIndex, MatchConfig, MatchError,
    MatchOutcome, PatientQuery, SubcategoryVote,
};
use crate::questioning::{
    generate_questions, select_question_features_excluding, FollowUpQuestion, MaskingConfig, QuestionError,
};
use crate::retriever::{document_diagnosis, DocumentIndex, RetrieveError, RetrievedContext};
use crate::template::{vars, PromptTemplates, TemplateError};
use crate::text::extract_json_object;

pub const NO_MANIFESTATIONS: &str = "(no manifestations reported)";
pub const NO_DOCUMENTS: &str = "(no retrieved records provided)";
pub const NO_SIMILAR_RECORDS: &str = "(no similar records found)";
pub const NO_DIFFERENCES: &str = "(no differential knowledge found)";
const REPROMPT: &str = "\n\nYour previous reply could not be parsed. Reply again with only the JSON object inside a ```json fenced block.";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("manifestation text yields no features")]
    ZeroFeatures,
    #[error("generator output could not be parsed after a retry")]
    Unparseable { raw: String },
    #[error("question `{0}` was never asked in this session")]
    UnknownQuestion(String),
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Match(MatchError),
    #[error(transparent)]
    Question(QuestionError),
    #[error(transparent)]
    Retrieve(RetrieveError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl EngineError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EngineError::Backend(e) if e.is_retriable())
    }
}

impl From<MatchError> for EngineError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::ZeroFeatures => EngineError::ZeroFeatures,
            MatchError::Llm(e) => EngineError::Backend(e),
            MatchError::Kg(e) => EngineError::Kg(e),
            e => EngineError::Match(e),
        }
    }
}

impl From<QuestionError> for EngineError {
    fn from(e: QuestionError) -> Self {
        match e {
            QuestionError::Llm(e) => EngineError::Backend(e),
            QuestionError::Kg(e) => EngineError::Kg(e),
            e => EngineError::Question(e),
        }
    }
}

impl From<RetrieveError> for EngineError {
    fn from(e: RetrieveError) -> Self {
        match e {
            RetrieveError::Llm(e) => EngineError::Backend(e),
            e => EngineError::Retrieve(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFlag {
    #[default]
    Normal,
    LowInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub diagnosis_l1: Option<String>,
    pub diagnosis_l2: Option<String>,
    pub diagnosis_l3: Option<String>,
    pub reasoning_text: String,
    pub treatments: Vec<String>,
    pub medications: Vec<String>,
    pub follow_up_questions: Vec<FollowUpQuestion>,
    pub confidence_flag: ConfidenceFlag,
    /// Some label did not resolve in the graph, or the labels do not form an
    /// ancestor chain.
    pub off_graph: bool,
}

impl DiagnosisReport {
    pub fn label(&self, level: Level) -> Option<&str> {
        match level {
            Level::L1 => self.diagnosis_l1.as_deref(),
            Level::L2 => self.diagnosis_l2.as_deref(),
            Level::L3 => self.diagnosis_l3.as_deref(),
            _ => None,
        }
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter()
        .find_map(|k| obj.get(*k))
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn list_field(obj: &serde_json::Map<String, Value>, key: &str) -> Vec<String> {
    match obj.get(key) {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.trim().to_string()],
        _ => Vec::new(),
    }
}

/// Parses the fenced JSON report and resolves its labels against `kg`.
pub fn parse_report(text: &str, kg: &DiagnosticKg) -> Option<DiagnosisReport> {
    let value = extract_json_object(text)?;
    let obj = value.as_object()?;
    let mut report = DiagnosisReport {
        reasoning_text: string_field(obj, &["reasoning", "reasoning_text"]).unwrap_or_default(),
        treatments: list_field(obj, "treatments"),
        medications: list_field(obj, "medications"),
        ..Default::default()
    };
    let mut resolved: [Option<NodeId>; 3] = [None, None, None];
    for (slot, (key, level)) in [("diagnosis_l1", Level::L1), ("diagnosis_l2", Level::L2), ("diagnosis_l3", Level::L3)]
        .into_iter()
        .enumerate()
    {
        let Some(label) = string_field(obj, &[key]) else { continue };
        let out = match kg.find_by_label(level, &label) {
            Some(node) => {
                resolved[slot] = Some(node.id.clone());
                node.label.clone()
            }
            None => {
                report.off_graph = true;
                label
            }
        };
        match level {
            Level::L1 => report.diagnosis_l1 = Some(out),
            Level::L2 => report.diagnosis_l2 = Some(out),
            _ => report.diagnosis_l3 = Some(out),
        }
    }
    let [l1, l2, l3] = &resolved;
    if let Some(l3) = l3 {
        if let Ok((p2, p1)) = kg.ancestors(l3.as_str()) {
            report.off_graph |= l2.as_ref().is_some_and(|x| *x != p2) || l1.as_ref().is_some_and(|x| *x != p1);
        }
    } else if let (Some(l2), Some(l1)) = (l2, l1) {
        let parent = kg
            .out_neighbors(l2.as_str(), crate::kg::Relation::IsA)
            .next()
            .cloned();
        report.off_graph |= parent.as_ref() != Some(l1);
    }
    Some(report)
}

/// How the differences block of the prompt is filled.
#[derive(Debug, Clone, Copy)]
pub enum DifferencesBlock<'a> {
    /// Baseline prompt without a differences block.
    Omitted,
    /// Differences block carrying the "nothing found" marker.
    Empty,
    Set(&'a DifferenceSet),
}

/// `"disease -> manifestation"` lines, grouped by disease.
pub fn render_differences(diffs: &DifferenceSet, kg: &DiagnosticKg) -> String {
    let lines: Vec<String> = diffs
        .grouped_labels(kg)
        .into_iter()
        .flat_map(|(d, fs)| fs.into_iter().map(move |f| format!("{d} -> {f}")))
        .collect();
    if lines.is_empty() {
        NO_DIFFERENCES.to_string()
    } else {
        lines.join("\n")
    }
}

pub fn render_documents(context: Option<&RetrievedContext>) -> String {
    match context {
        None => NO_DOCUMENTS.to_string(),
        Some(ctx) if ctx.hits.is_empty() => NO_SIMILAR_RECORDS.to_string(),
        Some(ctx) => ctx
            .hits
            .iter()
            .enumerate()
            .map(|(i, h)| format!("Record {} ({}):\n{}", i + 1, h.record_id, h.document_text))
            .collect::<Vec<_>>()
            .join("\n\n"),
    }
}

/// Builds `(system_text, user_text)` for the generator.
pub fn assemble_prompt(
    templates: &PromptTemplates,
    kg: &DiagnosticKg,
    query_text: &str,
    documents: Option<&RetrievedContext>,
    differences: DifferencesBlock<'_>,
) -> Result<(String, String), TemplateError> {
    let system = templates.diagnosis_system.render(&BTreeMap::new())?;
    let query = if query_text.trim().is_empty() {
        NO_MANIFESTATIONS.to_string()
    } else {
        query_text.to_string()
    };
    let documents = render_documents(documents);
    let user = match differences {
        DifferencesBlock::Omitted => templates
            .naive_user
            .render(&vars([("query", query), ("documents", documents)]))?,
        other => {
            let differences = match other {
                DifferencesBlock::Set(d) => render_differences(d, kg),
                _ => NO_DIFFERENCES.to_string(),
            };
            templates.diagnosis_user.render(&vars([
                ("query", query),
                ("documents", documents),
                ("differences", differences),
            ]))?
        }
    };
    Ok((system, user))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LegMode {
    #[default]
    With,
    Without,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DiagnoseOptions {
    pub retrieval: LegMode,
    pub kg: LegMode,
    /// Record never returned by retrieval, usually the patient's own.
    pub exclude_record: Option<String>,
    /// Seed for the random leg modes.
    pub seed: u64,
    /// Features never offered as follow-up questions.
    pub skip_questions: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestioningConfig {
    pub count: usize,
    /// Ask the chat backend to phrase questions.
    pub llm_phrasing: bool,
    pub mask: MaskingConfig,
}

impl Default for QuestioningConfig {
    fn default() -> Self {
        QuestioningConfig {
            count: 3,
            llm_phrasing: true,
            mask: MaskingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub matcher: MatchConfig,
    pub questioning: QuestioningConfig,
}

/// Pipeline intermediates kept for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisTrace {
    pub features: Vec<String>,
    pub matches: MatchOutcome,
    pub voted_subcategory: Option<NodeId>,
    pub question_subcategory: Option<NodeId>,
    pub differences: Option<DifferenceSet>,
    pub retrieved: Option<RetrievedContext>,
    pub system_text: String,
    pub user_text: String,
    pub raw_response: String,
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub report: DiagnosisReport,
    pub trace: DiagnosisTrace,
}

#[derive(Debug, Default)]
pub struct Telemetry {
    diagnoses: AtomicU64,
    chat_calls: AtomicU64,
    parse_retries: AtomicU64,
    low_info: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub diagnoses: u64,
    pub chat_calls: u64,
    pub parse_retries: u64,
    pub low_info: u64,
}

impl Telemetry {
    pub fn snapshot(&self) -> TelemetrySnapshot {
        TelemetrySnapshot {
            diagnoses: self.diagnoses.load(Ordering::Relaxed),
            chat_calls: self.chat_calls.load(Ordering::Relaxed),
            parse_retries: self.parse_retries.load(Ordering::Relaxed),
            low_info: self.low_info.load(Ordering::Relaxed),
        }
    }
}

/// Shared, read-only pipeline state. Cheap to share behind an `Arc`.
pub struct Engine {
    kg: Arc<DiagnosticKg>,
    index: Arc<DocumentIndex>,
    features: FeatureIndex,
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn Embedder>,
    templates: PromptTemplates,
    config: EngineConfig,
    telemetry: Telemetry,
}

impl Engine {
    pub fn new(
        kg: Arc<DiagnosticKg>,
        index: Arc<DocumentIndex>,
        chat: Arc<dyn ChatBackend>,
        embedder: Arc<dyn Embedder>,
        templates: PromptTemplates,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        config.matcher.validate()?;
        config.questioning.mask.validate()?;
        let features = FeatureIndex::build(&kg, embedder.as_ref())?;
        Ok(Engine {
            kg,
            index,
            features,
            chat,
            embedder,
            templates,
            config,
            telemetry: Telemetry::default(),
        })
    }

    pub fn kg(&self) -> &DiagnosticKg {
        &self.kg
    }

    pub fn index(&self) -> &DocumentIndex {
        &self.index
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn telemetry(&self) -> TelemetrySnapshot {
        self.telemetry.snapshot()
    }

    pub fn query(&self, text: &str) -> Result<PatientQuery, EngineError> {
        Ok(PatientQuery::from_text(text, self.embedder.as_ref())?)
    }

    /// Matches the query and, when anything matched, elects a subcategory.
    pub fn analyze(&self, query: &PatientQuery) -> Result<(MatchOutcome, Option<SubcategoryVote>), EngineError> {
        let matches = match_features(query, &self.features, &self.config.matcher);
        let vote = if matches.matched.is_empty() {
            None
        } else {
            Some(vote_subcategory(&matches.matched, &self.kg)?)
        };
        Ok((matches, vote))
    }

    pub fn diagnose(&self, text: &str, opts: &DiagnoseOptions) -> Result<Diagnosis, EngineError> {
        self.diagnose_query(&self.query(text)?, opts)
    }

    /// Runs the full pipeline on an embedded query. An empty query or an
    /// empty match set skips the graph leg and flags low confidence.
    pub fn diagnose_query(&self, query: &PatientQuery, opts: &DiagnoseOptions) -> Result<Diagnosis, EngineError> {
        self.telemetry.diagnoses.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (matches, vote) = self.analyze(query)?;
        let voted = vote.map(|v| v.winner);
        let low_info = voted.is_none();

        let differences = match (opts.kg, &voted) {
            (LegMode::Without, _) | (LegMode::With, None) => None,
            (LegMode::With, Some(s)) => Some(extract_differences(&self.kg, s.as_str())?),
            (LegMode::Random, _) => {
                let subcats: Vec<&NodeId> = self.kg.nodes_at(Level::L2).map(|n| &n.id).collect();
                match subcats.choose(&mut rng) {
                    Some(s) => Some(extract_differences(&self.kg, s.as_str())?),
                    None => None,
                }
            }
        };

        let k = self.config.matcher.k;
        let exclude = |id: &str| opts.exclude_record.as_deref() == Some(id);
        let query_vector = query.query_vector();
        let retrieved = match opts.retrieval {
            LegMode::Without => None,
            LegMode::With => Some(match &query_vector {
                Some(v) => self.index.retrieve_excluding(v, k, exclude)?,
                None => RetrievedContext {
                    hits: Vec::new(),
                    k_requested: k,
                },
            }),
            LegMode::Random => Some(self.index.sample(query_vector.as_ref(), k, &mut rng, exclude)?),
        };

        let block = match (opts.kg, &differences) {
            (LegMode::Without, _) => DifferencesBlock::Omitted,
            (_, Some(d)) => DifferencesBlock::Set(d),
            (_, None) => DifferencesBlock::Empty,
        };
        let (system_text, user_text) =
            assemble_prompt(&self.templates, &self.kg, &query.raw_text, retrieved.as_ref(), block)?;
        let (mut report, raw_response, retried) = self.generate(&system_text, &user_text)?;

        let question_subcategory = voted
            .clone()
            .or_else(|| retrieved.as_ref().and_then(|r| self.majority_subcategory(r)));
        if let Some(s) = &question_subcategory {
            let mut skip = opts.skip_questions.clone();
            skip.extend(matches.matched.iter().cloned());
            let picked =
                select_question_features_excluding(&self.kg, s.as_str(), self.config.questioning.count, &skip)?;
            if !picked.is_empty() {
                let chat = self.config.questioning.llm_phrasing.then_some(self.chat.as_ref());
                report.follow_up_questions = generate_questions(&picked, &self.kg, chat, &self.templates)?;
            }
        }
        if low_info {
            self.telemetry.low_info.fetch_add(1, Ordering::Relaxed);
            report.confidence_flag = ConfidenceFlag::LowInfo;
        }
        Ok(Diagnosis {
            report,
            trace: DiagnosisTrace {
                features: query.features.clone(),
                matches,
                voted_subcategory: voted,
                question_subcategory,
                differences,
                retrieved,
                system_text,
                user_text,
                raw_response,
                retried,
            },
        })
    }

    fn generate(&self, system: &str, user: &str) -> Result<(DiagnosisReport, String, bool), EngineError> {
        self.telemetry.chat_calls.fetch_add(1, Ordering::Relaxed);
        let first = self.chat.chat(system, user)?;
        if let Some(r) = parse_report(&first, &self.kg) {
            return Ok((r, first, false));
        }
        tracing::warn!("unparseable generation, reprompting once");
        self.telemetry.parse_retries.fetch_add(1, Ordering::Relaxed);
        self.telemetry.chat_calls.fetch_add(1, Ordering::Relaxed);
        let second = self.chat.chat(system, &format!("{user}{REPROMPT}"))?;
        match parse_report(&second, &self.kg) {
            Some(r) => Ok((r, second, true)),
            None => Err(EngineError::Unparseable { raw: second }),
        }
    }

    /// Most common subcategory among the diagnoses of retrieved records;
    /// ties go to the smaller id.
    fn majority_subcategory(&self, ctx: &RetrievedContext) -> Option<NodeId> {
        let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
        for hit in &ctx.hits {
            let Some(d) = document_diagnosis(&hit.document_text) else { continue };
            let Some(node) = self.kg.find_by_label(Level::L3, d) else { continue };
            if let Ok((l2, _)) = self.kg.ancestors(node.id.as_str()) {
                *counts.entry(l2).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(id, _)| id)
    }

    pub fn start_session(&self, session_id: &str, text: &str) -> Result<ConsultationSession, EngineError> {
        let query = self.query(text)?;
        let mut session = ConsultationSession {
            session_id: session_id.to_string(),
            query,
            turns: Vec::new(),
            asked: BTreeSet::new(),
            latest_report: None,
        };
        self.refresh(&mut session, None)?;
        Ok(session)
    }

    /// Applies an answer (if any) and re-diagnoses. An affirmed question
    /// appends its feature label to the query.
    pub fn consult_step(&self, session: &mut ConsultationSession, answer: Option<Answer>) -> Result<(), EngineError> {
        if let Some(a) = &answer {
            if !session.asked.contains(&a.node_id) {
                return Err(EngineError::UnknownQuestion(a.node_id.to_string()));
            }
        }
        let mut query = session.query.clone();
        if let Some(Answer { node_id, affirmed: true }) = &answer {
            let label = self.kg.node(node_id.as_str()).ok_or_else(|| KgError::UnknownNode(node_id.to_string()))?.label.clone();
            if !query.features.contains(&label) {
                let embedding = self.embedder.embed_one(&label)?;
                query.push_feature(&label, embedding);
            }
        }
        let prev = std::mem::replace(&mut session.query, query);
        if let Err(e) = self.refresh(session, answer) {
            session.query = prev;
            return Err(e);
        }
        Ok(())
    }

    fn refresh(&self, session: &mut ConsultationSession, answer: Option<Answer>) -> Result<(), EngineError> {
        let opts = DiagnoseOptions {
            skip_questions: session.asked.clone(),
            ..Default::default()
        };
        let report = self.diagnose_query(&session.query, &opts)?.report;
        session
            .asked
            .extend(report.follow_up_questions.iter().map(|q| q.node_id.clone()));
        session.turns.push(Turn {
            answer,
            questions: report.follow_up_questions.clone(),
        });
        session.latest_report = Some(report);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub node_id: NodeId,
    pub affirmed: bool,
}

/// One consultation step: the answer that triggered it and the questions it
/// produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub answer: Option<Answer>,
    pub questions: Vec<FollowUpQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsultationSession {
    pub session_id: String,
    pub query: PatientQuery,
    pub turns: Vec<Turn>,
    /// Every feature already offered as a question.
    pub asked: BTreeSet<NodeId>,
    pub latest_report: Option<DiagnosisReport>,
}

/// Stable id of a question within a session.
pub fn question_id(session_id: &str, node_id: &NodeId) -> String {
    let mut h = Sha256::new();
    h.update(session_id.as_bytes());
    h.update([0u8]);
    h.update(node_id.as_str().as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionView {
    pub question_id: String,
    pub node_id: NodeId,
    pub text: String,
}

/// What a client sees of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub report: Option<DiagnosisReport>,
    pub questions: Vec<QuestionView>,
    pub features: Vec<String>,
}

impl ConsultationSession {
    pub fn pending_questions(&self) -> &[FollowUpQuestion] {
        self.turns.last().map_or(&[], |t| t.questions.as_slice())
    }

    /// Node behind a question id, among all questions ever asked.
    pub fn resolve_question(&self, question_id_: &str) -> Option<&NodeId> {
        self.asked
            .iter()
            .find(|n| question_id(&self.session_id, n) == question_id_)
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            report: self.latest_report.clone(),
            questions: self
                .pending_questions()
                .iter()
                .map(|q| QuestionView {
                    question_id: question_id(&self.session_id, &q.node_id),
                    node_id: q.node_id.clone(),
                    text: q.text.clone(),
                })
                .collect(),
            features: self.query.features.clone(),
        }
    }
}
