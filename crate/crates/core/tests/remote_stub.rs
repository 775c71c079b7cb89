//! Contract tests for the HTTP generation client against a local stub
//! server: streaming reassembly, retry behavior, error surfacing, and the
//! streaming/non-streaming text agreement.

use fanout_core::backend::{
    BackendError, GenerationBackend, GenerationRequest, RemoteBackend, RemoteConfig, StreamEvent,
};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

/// One canned HTTP exchange.
#[derive(Clone)]
enum Reply {
    /// SSE stream of content deltas, optionally terminated by `[DONE]`.
    Sse { deltas: Vec<&'static str>, done: bool },
    /// Non-streaming chat completion body.
    Json(&'static str),
    /// Bare status line with a short body.
    Status(u16),
    /// Sleep before answering, to trip the client timeout.
    Stall(Duration),
}

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<serde_json::Value>>>,
    handle: Option<JoinHandle<()>>,
}

impl Stub {
    /// Serves the replies in order, one connection each, then exits.
    fn serve(replies: Vec<Reply>) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests: Arc<Mutex<Vec<serde_json::Value>>> = Arc::default();
        let seen = requests.clone();
        let handle = thread::spawn(move || {
            for reply in replies {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                handle_connection(stream, reply, &seen);
            }
        });
        Stub {
            url,
            requests,
            handle: Some(handle),
        }
    }

    fn backend(&self, retries: u32) -> RemoteBackend<f64> {
        let cfg = RemoteConfig {
            base_url: self.url.clone(),
            model: "stub-model".to_string(),
            api_key: Some("stub-key".to_string()),
            timeout: Duration::from_millis(500),
            max_retries: retries,
        };
        RemoteBackend::new(cfg).unwrap()
    }

    fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    fn request(&self, idx: usize) -> serde_json::Value {
        self.requests.lock().unwrap()[idx].clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, reply: Reply, seen: &Mutex<Vec<serde_json::Value>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
        if line.is_empty() {
            break;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).unwrap();
    if let Ok(v) = serde_json::from_slice(&body) {
        seen.lock().unwrap().push(v);
    }

    let (status, content_type, payload) = match reply {
        Reply::Sse { deltas, done } => {
            let mut body = String::new();
            for d in deltas {
                let chunk = serde_json::json!({"choices": [{"delta": {"content": d}}]});
                body.push_str(&format!("data: {chunk}\n\n"));
            }
            if done {
                body.push_str("data: [DONE]\n\n");
            }
            ("200 OK", "text/event-stream", body)
        }
        Reply::Json(text) => {
            let body = serde_json::json!({"choices": [{"message": {"content": text}}]});
            ("200 OK", "application/json", body.to_string())
        }
        Reply::Status(code) => {
            let status: &'static str = match code {
                503 => "503 Service Unavailable",
                400 => "400 Bad Request",
                _ => "500 Internal Server Error",
            };
            (status, "text/plain", "backend overloaded".to_string())
        }
        Reply::Stall(pause) => {
            thread::sleep(pause);
            ("200 OK", "text/plain", String::new())
        }
    };
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}

#[test]
fn streaming_reassembles_deltas_in_order() {
    let stub = Stub::serve(vec![Reply::Sse {
        deltas: vec!["Hello", " from", " the", " stub"],
        done: true,
    }]);
    let backend = stub.backend(0);
    let req = GenerationRequest::new("say hello to the test suite");

    let mut events: Vec<String> = Vec::new();
    let res = backend
        .generate(&req, &mut |ev| {
            events.push(match ev {
                StreamEvent::FirstToken => "<first>".to_string(),
                StreamEvent::Text(t) => t.to_string(),
            })
        })
        .unwrap();

    assert_eq!(res.text, "Hello from the stub");
    assert_eq!(res.output_tokens, 4);
    assert_eq!(events[0], "<first>", "boundary fires before any text");
    assert_eq!(events[1..], ["Hello", " from", " the", " stub"]);
    assert_eq!(res.token_times.as_ref().map(Vec::len), Some(4));
    assert!(res.prefill_time > 0.0);

    // The request body follows the chat-completions convention.
    let body = stub.request(0);
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["stream"], true);
    assert_eq!(body["messages"][0]["content"], "say hello to the test suite");
}

#[test]
fn overload_is_retried_then_surfaced() {
    let stub = Stub::serve(vec![Reply::Status(503); 3]);
    let backend = stub.backend(2);
    let req = GenerationRequest::new("retry me");

    let err = backend.generate(&req, &mut |_| {}).unwrap_err();
    match err {
        BackendError::HttpError { status, .. } => assert_eq!(status, 503),
        other => panic!("expected http error, got {other:?}"),
    }
    assert_eq!(stub.request_count(), 3, "initial try plus two retries");
}

#[test]
fn transient_overload_recovers_on_retry() {
    let stub = Stub::serve(vec![
        Reply::Status(503),
        Reply::Sse {
            deltas: vec!["recovered"],
            done: true,
        },
    ]);
    let backend = stub.backend(2);
    let res = backend
        .generate(&GenerationRequest::new("retry me"), &mut |_| {})
        .unwrap();
    assert_eq!(res.text, "recovered");
    assert_eq!(stub.request_count(), 2);
}

#[test]
fn missing_done_marker_is_a_stream_interruption_without_retry() {
    let stub = Stub::serve(vec![Reply::Sse {
        deltas: vec!["partial answer"],
        done: false,
    }]);
    let backend = stub.backend(2);
    let err = backend
        .generate(&GenerationRequest::new("truncate me"), &mut |_| {})
        .unwrap_err();
    assert!(
        matches!(err, BackendError::StreamInterrupted(_)),
        "got {err:?}"
    );
    // Tokens already reached the caller, so the call must not be replayed.
    assert_eq!(stub.request_count(), 1);
}

#[test]
fn streaming_and_blocking_bodies_agree() {
    let stub = Stub::serve(vec![
        Reply::Sse {
            deltas: vec!["both ", "paths ", "agree"],
            done: true,
        },
        Reply::Json("both paths agree"),
    ]);
    let backend = stub.backend(0);

    let streamed = backend
        .generate(&GenerationRequest::new("which path?"), &mut |_| {})
        .unwrap();
    let blocking = backend
        .generate(
            &GenerationRequest::new("which path?").with_stream(false),
            &mut |_| {},
        )
        .unwrap();

    assert_eq!(streamed.text, blocking.text);
    assert_eq!(streamed.output_tokens, blocking.output_tokens);
    // Without a stream there is no observable phase boundary: the whole
    // latency is prefill and no per-token times exist.
    assert_eq!(blocking.decode_time, 0.0);
    assert!(blocking.token_times.is_none());
    assert_eq!(stub.request(1)["stream"], false);
}

#[test]
fn stalled_server_times_out() {
    let stub = Stub::serve(vec![Reply::Stall(Duration::from_millis(800)); 2]);
    let backend = stub.backend(1);
    let err = backend
        .generate(&GenerationRequest::new("too slow"), &mut |_| {})
        .unwrap_err();
    assert!(matches!(err, BackendError::Timeout(_)), "got {err:?}");
}
