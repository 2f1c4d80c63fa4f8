//! In-process OpenAI-compatible server for tests.
//!
//! The server runs on its own thread and runtime, so it works from both sync
//! and async tests.
//!
//! ```no_run
//! use medvl_client::mock::{MockReply, MockServer};
//! let server = MockServer::start(|_req| MockReply::text("yes"));
//! let base_url = server.base_url();
//! # drop(base_url);
//! ```

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// What the server answers with.
#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// 200 with this assistant message.
    Text(String),
    /// Bare status code with a short body.
    Status(u16),
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
}

/// A received chat-completions request.
#[derive(Debug, Clone)]
pub struct MockRequest {
    pub body: Value,
    pub authorization: Option<String>,
    /// 0-based arrival index.
    pub index: usize,
}

impl MockRequest {
    /// Concatenated text of the last user message.
    pub fn user_text(&self) -> String {
        let Some(msgs) = self.body["messages"].as_array() else { return String::new() };
        let Some(user) = msgs.iter().rev().find(|m| m["role"] == "user") else { return String::new() };
        match &user["content"] {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
            _ => String::new(),
        }
    }

    pub fn image_urls(&self) -> Vec<String> {
        let mut out = Vec::new();
        for m in self.body["messages"].as_array().into_iter().flatten() {
            for p in m["content"].as_array().into_iter().flatten() {
                if let Some(u) = p["image_url"]["url"].as_str() {
                    out.push(u.to_string());
                }
            }
        }
        out
    }
}

type Responder = Arc<dyn Fn(&MockRequest) -> MockReply + Send + Sync>;

struct Shared {
    responder: Responder,
    script: Mutex<VecDeque<MockReply>>,
    delay: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

#[derive(Default)]
pub struct MockServerBuilder {
    script: Vec<MockReply>,
    delay: Option<Duration>,
}

impl MockServerBuilder {
    /// Replies served in order before the responder is consulted.
    pub fn script(mut self, replies: impl IntoIterator<Item = MockReply>) -> Self {
        self.script.extend(replies);
        self
    }

    /// Holds every response for `d`, which makes concurrency observable.
    pub fn delay(mut self, d: Duration) -> Self {
        self.delay = Some(d);
        self
    }

    pub fn start(self, responder: impl Fn(&MockRequest) -> MockReply + Send + Sync + 'static) -> MockServer {
        let shared = Arc::new(Shared {
            responder: Arc::new(responder),
            script: Mutex::new(self.script.into()),
            delay: self.delay,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        });
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let state = Arc::clone(&shared);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("mock runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind mock server");
                addr_tx.send(listener.local_addr().expect("local addr")).expect("report address");
                let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(state);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        let addr = addr_rx.recv().expect("mock server address");
        MockServer { addr, shared, stop: Some(stop_tx), thread: Some(thread) }
    }
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn builder() -> MockServerBuilder {
        MockServerBuilder::default()
    }

    pub fn start(responder: impl Fn(&MockRequest) -> MockReply + Send + Sync + 'static) -> Self {
        Self::builder().start(responder)
    }

    /// Value for `EndpointConfig::base_url`.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests received so far.
    pub fn calls(&self) -> usize {
        self.shared.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.shared.calls.store(0, Ordering::SeqCst);
    }

    /// Highest number of requests observed in flight at once.
    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

async fn handle(State(shared): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let index = shared.calls.fetch_add(1, Ordering::SeqCst);
    let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_in_flight.fetch_max(now, Ordering::SeqCst);

    let req = MockRequest {
        body,
        authorization: headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string),
        index,
    };
    let scripted = shared.script.lock().unwrap_or_else(|p| p.into_inner()).pop_front();
    let reply = scripted.unwrap_or_else(|| (shared.responder)(&req));
    if let Some(d) = shared.delay {
        tokio::time::sleep(d).await;
    }
    shared.in_flight.fetch_sub(1, Ordering::SeqCst);

    match reply {
        MockReply::Text(text) => Json(json!({
            "id": format!("mock-{index}"),
            "object": "chat.completion",
            "model": req.body["model"],
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        }))
        .into_response(),
        MockReply::Status(code) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(json!({"error": {"message": format!("mock status {code}")}}))).into_response()
        }
    }
}
