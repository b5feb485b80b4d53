use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use scenelayers::exec::{par_map, with_workers};
use scenelayers::gateway::{
    cache_key, Backoff, CacheMode, ChatRequest, Endpoint, FailureKind, Gateway, GatewayError,
    MockBackend, ModelSpec, ScriptRecord, Usage,
};
use scenelayers::imageprep::{resize, synthetic_png, ImageInput, ResolutionLevel};

fn mock_gateway(
    mock: MockBackend,
    cache: CacheMode,
    spec: ModelSpec,
) -> (Gateway, Arc<MockBackend>) {
    let mock = Arc::new(mock);
    let mut gw = Gateway::new(cache).with_backoff(Backoff::none());
    gw.register_backend(spec, mock.clone()).unwrap();
    (gw, mock)
}

#[test]
fn fingerprint_script_echoes_exact_text() {
    let request = ChatRequest::new("m", "is it odd?");
    let key = cache_key(&request, 0.0);
    let script = ScriptRecord {
        fingerprint: Some(key.clone()),
        reply: "verdict: yes / layers: S".into(),
        ..Default::default()
    };
    let (gw, _) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Memory,
        ModelSpec::mock("m"),
    );
    let r = gw.complete(&request).unwrap();
    assert_eq!(r.text, "verdict: yes / layers: S");
    assert!(!r.cache_hit);
    assert_eq!(r.cache_key, key);
}

#[test]
fn cache_hit_skips_backend_and_adds_no_cost() {
    let mut spec = ModelSpec::mock("m");
    spec.input_price = 2.0;
    spec.output_price = 10.0;
    let script = ScriptRecord {
        reply: "ok".into(),
        usage: Some(Usage {
            input_tokens: 1000,
            output_tokens: 100,
        }),
        ..Default::default()
    };
    let (gw, mock) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Memory,
        spec,
    );
    let request = ChatRequest::new("m", "hello");
    let first = gw.complete(&request).unwrap();
    let second = gw.complete(&request).unwrap();
    assert_eq!(mock.call_count(), 1);
    assert!((first.cost - (1000.0 * 2.0 + 100.0 * 10.0) / 1e6).abs() < 1e-15);
    assert!(second.cache_hit);
    assert_eq!((second.cost, second.attempt_count), (0.0, 0));
    assert_eq!(second.text, first.text);
    let ledger = gw.ledger("m").unwrap();
    assert_eq!(ledger.backend_calls, 1);
    assert_eq!(ledger.cache_hits, 1);
    assert!((ledger.total_cost - (first.cost + second.cost)).abs() < 1e-15);
}

#[test]
fn disk_cache_survives_a_new_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let request = ChatRequest::new("m", "persist me");
    let script = ScriptRecord::reply_to("persist", "stored");
    let (gw, _) = mock_gateway(
        MockBackend::new().with_scripts(vec![script.clone()]),
        CacheMode::Disk(dir.path().into()),
        ModelSpec::mock("m"),
    );
    gw.complete(&request).unwrap();
    let (gw2, mock2) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Disk(dir.path().into()),
        ModelSpec::mock("m"),
    );
    let r = gw2.complete(&request).unwrap();
    assert!(r.cache_hit);
    assert_eq!(r.text, "stored");
    assert_eq!(mock2.call_count(), 0);
}

#[test]
fn fail_twice_then_succeed_uses_two_retries() {
    let script = ScriptRecord {
        reply: "fine".into(),
        fail_times: 2,
        failure: FailureKind::Transport,
        ..Default::default()
    };
    let (gw, mock) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Disabled,
        ModelSpec::mock("m"),
    );
    let r = gw.complete(&ChatRequest::new("m", "x")).unwrap();
    assert_eq!((r.text.as_str(), r.attempt_count), ("fine", 2));
    assert_eq!(mock.call_count(), 3);
}

#[test]
fn exhausted_retries_report_transport_error_with_key() {
    let mut spec = ModelSpec::mock("m");
    spec.max_retries = 2;
    let script = ScriptRecord {
        always_fail: true,
        ..Default::default()
    };
    let (gw, mock) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Disabled,
        spec,
    );
    let request = ChatRequest::new("m", "x");
    let err = gw.complete(&request).unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(err.cache_key(), Some(cache_key(&request, 0.0).as_str()));
    assert_eq!(mock.call_count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let script = ScriptRecord {
        always_fail: true,
        failure: FailureKind::Http400,
        ..Default::default()
    };
    let (gw, mock) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Disabled,
        ModelSpec::mock("m"),
    );
    let err = gw.complete(&ChatRequest::new("m", "x")).unwrap_err();
    assert!(matches!(err, GatewayError::Backend { status: 400, .. }));
    assert_eq!(mock.call_count(), 1);
}

#[test]
fn server_errors_are_retried_then_reported_with_status() {
    let script = ScriptRecord {
        always_fail: true,
        failure: FailureKind::Http500,
        ..Default::default()
    };
    let (gw, mock) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Disabled,
        ModelSpec::mock("m"),
    );
    let err = gw.complete(&ChatRequest::new("m", "x")).unwrap_err();
    assert!(matches!(err, GatewayError::Backend { status: 500, .. }));
    assert_eq!(mock.call_count(), 4);
}

#[test]
fn unknown_model_is_rejected() {
    let gw = Gateway::new(CacheMode::Disabled);
    assert!(matches!(
        gw.complete(&ChatRequest::new("ghost", "x")),
        Err(GatewayError::UnknownModel(_))
    ));
}

#[test]
fn in_flight_limit_holds_under_load() {
    let mut spec = ModelSpec::mock("m");
    spec.max_in_flight = 3;
    let mock = MockBackend::new()
        .with_scripts(vec![ScriptRecord {
            reply: "ok".into(),
            ..Default::default()
        }])
        .with_delay(Duration::from_millis(15));
    let (gw, mock) = mock_gateway(mock, CacheMode::Disabled, spec);
    let requests: Vec<ChatRequest> = (0..24)
        .map(|i| ChatRequest::new("m", format!("q{i}")))
        .collect();
    let out = with_workers(8, || par_map(&requests, |r| gw.complete(r).map(|_| ())));
    assert!(out.iter().all(Result::is_ok));
    assert!(
        mock.peak_concurrency() <= 3,
        "peak {}",
        mock.peak_concurrency()
    );
    assert!(gw.peak_in_flight("m").unwrap() <= 3);
}

#[test]
fn missing_usage_falls_back_to_flagged_estimates() {
    let text = "a".repeat(400);
    let script = ScriptRecord::reply_to("a", "b".repeat(9));
    let (gw, _) = mock_gateway(
        MockBackend::new().with_scripts(vec![script]),
        CacheMode::Disabled,
        ModelSpec::mock("m"),
    );
    let img = ImageInput::from_bytes("i", synthetic_png(1280, 720, 1)).unwrap();
    let img = resize(&img, ResolutionLevel::P720).unwrap();
    let r = gw
        .complete(&ChatRequest::new("m", text).with_image(img))
        .unwrap();
    assert!(r.tokens_estimated);
    assert_eq!(r.image_tokens, 1032);
    assert_eq!(r.input_tokens, 100 + 1032);
    assert_eq!(r.output_tokens, 3);
}

// --- HTTP backend against a local chat-completions server ---

#[derive(Default)]
struct ServerState {
    hits: AtomicUsize,
    /// Statuses to return before succeeding.
    failures: Mutex<Vec<u16>>,
    delay_ms: u64,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<Option<String>>>,
}

async fn completions(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    state.hits.fetch_add(1, Ordering::SeqCst);
    state.bodies.lock().unwrap().push(body);
    state.auth.lock().unwrap().push(
        headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string),
    );
    if state.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.delay_ms)).await;
    }
    let next = {
        let mut f = state.failures.lock().unwrap();
        (!f.is_empty()).then(|| f.remove(0))
    };
    if let Some(status) = next {
        return (
            StatusCode::from_u16(status).unwrap(),
            Json(json!({"error": "scripted"})),
        );
    }
    (
        StatusCode::OK,
        Json(json!({
            "choices": [{"message": {"role": "assistant", "content": "verdict: no\nlayers: none\nrationale: clear road"}}],
            "usage": {"prompt_tokens": 321, "completion_tokens": 12}
        })),
    )
}

fn serve(state: Arc<ServerState>) -> String {
    let app = Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(state);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}/v1", rx.recv().unwrap())
}

fn http_gateway(base_url: String, key_env: &str, timeout: f64, retries: u32) -> Gateway {
    let mut spec = ModelSpec::new(
        "remote",
        Endpoint::OpenaiCompatible {
            base_url,
            remote_model: Some("vendor/vlm-1".into()),
            api_key_env: key_env.into(),
        },
    );
    spec.timeout_secs = timeout;
    spec.max_retries = retries;
    spec.input_price = 1.25;
    spec.output_price = 10.0;
    let mut gw = Gateway::new(CacheMode::Memory).with_backoff(Backoff::none());
    gw.register(spec).unwrap();
    gw
}

#[test]
fn http_round_trip_with_usage_auth_and_image() {
    let state = Arc::new(ServerState::default());
    let url = serve(state.clone());
    std::env::set_var("SCENELAYERS_TEST_KEY_A", "sk-test");
    let gw = http_gateway(url, "SCENELAYERS_TEST_KEY_A", 5.0, 0);
    let img = ImageInput::from_bytes("i", synthetic_png(8, 8, 3)).unwrap();
    let request = ChatRequest::new("remote", "look")
        .with_system("be brief")
        .with_image(img);
    let r = gw.complete(&request).unwrap();
    assert!(r.text.starts_with("verdict: no"));
    assert_eq!(
        (r.input_tokens, r.output_tokens, r.tokens_estimated),
        (321, 12, false)
    );
    assert!((r.cost - (321.0 * 1.25 + 12.0 * 10.0) / 1e6).abs() < 1e-15);
    let body = state.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "vendor/vlm-1");
    assert_eq!(body["messages"][0]["content"], "be brief");
    assert!(body["messages"][1]["content"][1]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert_eq!(
        state.auth.lock().unwrap()[0].as_deref(),
        Some("Bearer sk-test")
    );

    let again = gw.complete(&request).unwrap();
    assert!(again.cache_hit);
    assert_eq!(state.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn http_retries_server_errors() {
    let state = Arc::new(ServerState {
        failures: Mutex::new(vec![503, 429]),
        ..Default::default()
    });
    let url = serve(state.clone());
    let gw = http_gateway(url, "SCENELAYERS_TEST_KEY_UNSET", 5.0, 3);
    let r = gw.complete(&ChatRequest::new("remote", "x")).unwrap();
    assert_eq!(r.attempt_count, 2);
    assert_eq!(state.hits.load(Ordering::SeqCst), 3);
    assert_eq!(state.auth.lock().unwrap()[0], None);
}

#[test]
fn http_client_error_carries_status_and_body() {
    let state = Arc::new(ServerState {
        failures: Mutex::new(vec![401]),
        ..Default::default()
    });
    let url = serve(state.clone());
    let gw = http_gateway(url, "SCENELAYERS_TEST_KEY_UNSET", 5.0, 3);
    let err = gw.complete(&ChatRequest::new("remote", "x")).unwrap_err();
    match err {
        GatewayError::Backend { status, body, .. } => {
            assert_eq!(status, 401);
            assert!(body.contains("scripted"));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(state.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn http_timeout_is_reported() {
    let state = Arc::new(ServerState {
        delay_ms: 1500,
        ..Default::default()
    });
    let url = serve(state);
    let gw = http_gateway(url, "SCENELAYERS_TEST_KEY_UNSET", 0.3, 0);
    let err = gw.complete(&ChatRequest::new("remote", "x")).unwrap_err();
    assert!(matches!(err, GatewayError::Timeout { .. }), "{err}");
}

#[test]
fn http_connection_refused_is_transport() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let gw = http_gateway(
        format!("http://{addr}/v1"),
        "SCENELAYERS_TEST_KEY_UNSET",
        2.0,
        1,
    );
    let err = gw.complete(&ChatRequest::new("remote", "x")).unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 2, .. }),
        "{err}"
    );
}
