use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kgdx::service::{router, AppState, DifferencesResponse, ErrorBody, Health};
use kgdx_core::engine::{question_id, Engine, EngineConfig, SessionView};
use kgdx_core::fixtures::{toy_corpus, toy_kg};
use kgdx_core::llm::{ChatBackend, FnChat, LlmError, MockEmbedder};
use kgdx_core::retriever::ingest;
use kgdx_core::template::PromptTemplates;
use serde_json::{json, Value};
use tower::ServiceExt;

const REPORT: &str = r#"{"diagnosis_l1": "musculoskeletal pain", "diagnosis_l2": "lumbar pain", "diagnosis_l3": "sciatica", "reasoning": "r", "treatments": ["rest"], "medications": []}"#;

fn engine(chat: Arc<dyn ChatBackend>) -> Arc<Engine> {
    let emb = Arc::new(MockEmbedder::new(64));
    let index = ingest(&toy_corpus(), emb.as_ref(), None).unwrap();
    let mut config = EngineConfig::default();
    config.questioning.llm_phrasing = false;
    Arc::new(Engine::new(Arc::new(toy_kg()), Arc::new(index), chat, emb, PromptTemplates::default(), config).unwrap())
}

fn fixed_chat() -> Arc<dyn ChatBackend> {
    Arc::new(FnChat(|_: &str, _: &str| -> Result<String, LlmError> { Ok(REPORT.into()) }))
}

fn state() -> Arc<AppState> {
    AppState::new(engine(fixed_chat()))
}

async fn send(state: &Arc<AppState>, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn open(state: &Arc<AppState>, text: &str) -> SessionView {
    let (status, body) = send(state, "POST", "/sessions", Some(&json!({ "manifestation_text": text }).to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    serde_json::from_value(body).unwrap()
}

fn error(body: Value) -> ErrorBody {
    serde_json::from_value(body).unwrap()
}

#[tokio::test]
async fn health_reports_loaded_artifacts() {
    let s = state();
    let (status, body) = send(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_value(body).unwrap();
    assert_eq!(h, Health { status: "ok".into(), kg_nodes: toy_kg().node_count(), index_size: toy_corpus().len() });
}

#[tokio::test]
async fn new_session_matches_in_process_engine() {
    let s = state();
    let text = "pain located in lumbar region";
    let view = open(&s, text).await;
    let local = s.engine().start_session(&view.session_id, text).unwrap().view();
    assert_eq!(view, local);
    assert_eq!(view.report.as_ref().unwrap().diagnosis_l3.as_deref(), Some("sciatica"));
    let asked: Vec<&str> = view.questions.iter().map(|q| q.node_id.as_str()).collect();
    assert_eq!(asked, ["L4d:morning_stiffness", "L4d:pain_worsens_while_walking", "L4d:shooting_pain_down_leg"]);
    for q in &view.questions {
        assert_eq!(q.question_id, question_id(&view.session_id, &q.node_id));
    }

    let other = open(&s, text).await;
    assert_ne!(other.session_id, view.session_id);
}

#[tokio::test]
async fn bad_session_requests_are_rejected() {
    let s = state();
    let (status, body) = send(&s, "POST", "/sessions", Some(r#"{"manifestation_text": "  "}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(!error(body).retriable);

    let (status, _) = send(&s, "POST", "/sessions", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&s, "POST", "/sessions", Some(r#"{"text": "pain"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = send(&s, "POST", "/sessions", Some(r#"{"manifestation_text": " ;. "}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!error(body).retriable);
}

#[tokio::test]
async fn backend_outage_is_a_retriable_bad_gateway() {
    let chat = Arc::new(FnChat(|_: &str, _: &str| -> Result<String, LlmError> {
        Err(LlmError::Http { status: 503, body: "overloaded".into() })
    }));
    let s = AppState::new(engine(chat));
    let (status, body) =
        send(&s, "POST", "/sessions", Some(r#"{"manifestation_text": "pain located in lumbar region"}"#)).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(error(body).retriable);
}

#[tokio::test]
async fn answers_grow_the_feature_list() {
    let s = state();
    let view = open(&s, "pain located in lumbar region").await;
    let walking = view.questions.iter().find(|q| q.node_id.as_str() == "L4d:pain_worsens_while_walking").unwrap();
    let uri = format!("/sessions/{}/answers", view.session_id);
    let (status, body) = send(
        &s,
        "POST",
        &uri,
        Some(&json!({ "question_id": walking.question_id, "affirmation": true }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let next: SessionView = serde_json::from_value(body).unwrap();
    assert_eq!(next.features, ["pain located in lumbar region", "pain worsens while walking"]);
    assert!(next.questions.is_empty());

    let morning = &view.questions[0];
    let (status, body) = send(
        &s,
        "POST",
        &uri,
        Some(&json!({ "question_id": morning.question_id, "affirmation": false }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let last: SessionView = serde_json::from_value(body).unwrap();
    assert_eq!(last.features.len(), 2);

    let snap = s.snapshot().await;
    assert_eq!(snap.len(), 1);
    assert_eq!(snap[0].turns.len(), 3);
}

#[tokio::test]
async fn answer_errors() {
    let s = state();
    let view = open(&s, "pain located in lumbar region").await;
    let uri = format!("/sessions/{}/answers", view.session_id);
    let (status, _) = send(&s, "POST", &uri, Some(r#"{"question_id": "ffff", "affirmation": true}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&s, "POST", &uri, Some(r#"{"question_id": 3}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let q = &view.questions[0].question_id;
    let (status, _) = send(
        &s,
        "POST",
        "/sessions/nope/answers",
        Some(&json!({ "question_id": q, "affirmation": true }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_steps_on_one_session_conflict() {
    let chat = Arc::new(FnChat(|_: &str, _: &str| -> Result<String, LlmError> {
        std::thread::sleep(Duration::from_millis(400));
        Ok(REPORT.into())
    }));
    let s = AppState::new(engine(chat));
    let view = open(&s, "pain located in lumbar region").await;
    let uri = format!("/sessions/{}/answers", view.session_id);
    let body = json!({ "question_id": view.questions[0].question_id, "affirmation": false }).to_string();

    let first = {
        let (s, uri, body) = (s.clone(), uri.clone(), body.clone());
        tokio::spawn(async move { send(&s, "POST", &uri, Some(&body)).await })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    let (status, err) = send(&s, "POST", &uri, Some(&body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(!error(err).retriable);
    assert_eq!(first.await.unwrap().0, StatusCode::OK);
}

#[tokio::test]
async fn differences_endpoint() {
    let s = state();
    let (status, body) = send(&s, "GET", "/kg/differences?subcategory=L2:lumbar_pain", None).await;
    assert_eq!(status, StatusCode::OK);
    let d: DifferencesResponse = serde_json::from_value(body).unwrap();
    let triples: Vec<(String, String)> =
        d.set.triples.iter().map(|t| (t.disease.to_string(), t.feature.to_string())).collect();
    assert_eq!(
        triples,
        [
            ("L3:lumbar_canal_stenosis".to_string(), "L4a:pain_alleviated_when_sitting".to_string()),
            ("L3:lumbar_spondylosis".to_string(), "L4a:stiffness_or_pain_in_the_lower_back".to_string()),
            ("L3:sciatica".to_string(), "L4a:pain_worsens_when_sitting".to_string()),
        ]
    );
    assert_eq!(d.by_disease.len(), 3);
    assert_eq!(d.by_disease[0].disease, "lumbar canal stenosis");
    assert_eq!(d.by_disease[0].features, ["pain alleviated when sitting"]);

    let (status, body) = send(&s, "GET", "/kg/differences?subcategory=L2:neck_pain", None).await;
    assert_eq!(status, StatusCode::OK);
    let d: DifferencesResponse = serde_json::from_value(body).unwrap();
    assert!(d.set.is_empty() && d.by_disease.is_empty());

    for bad in ["L2:nope", "L3:sciatica"] {
        let (status, _) = send(&s, "GET", &format!("/kg/differences?subcategory={bad}"), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{bad}");
    }
    let (status, _) = send(&s, "GET", "/kg/differences", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn snapshot_round_trip() {
    let s = state();
    let view = open(&s, "pain located in lumbar region").await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.json");
    s.save_snapshot(&path).await.unwrap();

    let fresh = state();
    assert_eq!(fresh.load_snapshot(&path).await.unwrap(), 1);
    let uri = format!("/sessions/{}/answers", view.session_id);
    let body = json!({ "question_id": view.questions[1].question_id, "affirmation": true }).to_string();
    let (status, _) = send(&fresh, "POST", &uri, Some(&body)).await;
    assert_eq!(status, StatusCode::OK);
}
