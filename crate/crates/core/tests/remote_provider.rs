use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};
use waypoint_rl::geometry::GridSpec;
use waypoint_rl::prompting::{
    build_annotation, AnnotatedObservation, EndpointConfig, PromptError, RemoteProvider, WaypointProvider,
};
use waypoint_rl::sim::{reset, BinSide, Projection, SimParams, TaskPair};

/// Serves one scripted chat-completions answer per request and records the
/// request bodies and authorization headers.
struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<(Option<String>, Value)>>>,
}

fn serve(answers: Vec<(u16, String)>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    thread::spawn(move || {
        for (status, content) in answers {
            let Ok((stream, _)) = listener.accept() else {
                return;
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            let mut line = String::new();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(l["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push((auth, serde_json::from_slice(&body).unwrap()));
            let payload = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    MockServer { url, requests }
}

fn annotation() -> AnnotatedObservation {
    let pair = TaskPair::bin_sort(BinSide::Left);
    let state = reset(&pair.forward, &SimParams::default(), 0, false);
    build_annotation(
        &state,
        &pair.forward,
        &Projection::scaled(100.0, 0.0),
        &GridSpec::with_image(100, 100).unwrap(),
        0,
    )
    .unwrap()
}

fn provider(url: &str, retries: usize, api_key_env: Option<&str>) -> RemoteProvider {
    RemoteProvider::new(EndpointConfig {
        base_url: url.to_string(),
        model: "mock-vlm".into(),
        api_key_env: api_key_env.map(str::to_string),
        timeout_secs: 10,
        retries,
    })
}

#[test]
fn parses_first_array_and_sends_images() {
    let server = serve(vec![(200, "Here: [[0,0,0],[1,1,2]]".into())]);
    let seq = provider(&server.url, 3, None)
        .query(&annotation(), "put the block in the left bin")
        .unwrap();
    assert_eq!(seq.len(), 2);
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    let body = &reqs[0].1;
    assert_eq!(body["model"], "mock-vlm");
    let parts = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "text");
    assert!(parts[0]["text"]
        .as_str()
        .unwrap()
        .contains("put the block in the left bin"));
    assert!(parts[0]["text"].as_str().unwrap().contains("P1, P2, P3, P4, P5"));
    let images: Vec<_> = parts.iter().filter(|p| p["type"] == "image_url").collect();
    assert_eq!(images.len(), 2);
    assert!(images[0]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
}

#[test]
fn out_of_bounds_answer_triggers_retry_with_feedback() {
    let server = serve(vec![
        (200, "[[0,0,9],[1,1,1]]".into()),
        (200, "fixed: [[2,1,0],[2,1,1]]".into()),
    ]);
    let seq = provider(&server.url, 3, None).query(&annotation(), "sort").unwrap();
    assert_eq!(seq.first().x, 2);
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 2);
    let msgs = reqs[1].1["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 3);
    assert_eq!(msgs[1]["role"], "assistant");
    assert!(msgs[2]["content"].as_str().unwrap().contains("could not be used"));
}

#[test]
fn exhausted_retries_error() {
    let server = serve(vec![(200, "I am not sure.".into()); 4]);
    let err = provider(&server.url, 3, None).query(&annotation(), "sort").unwrap_err();
    assert!(
        matches!(err, PromptError::RetriesExhausted { attempts: 4, .. }),
        "{err}"
    );
    assert_eq!(server.requests.lock().unwrap().len(), 4);
}

#[test]
fn http_error_is_network_error() {
    let server = serve(vec![(500, "boom".into())]);
    let err = provider(&server.url, 3, None).query(&annotation(), "sort").unwrap_err();
    assert!(matches!(err, PromptError::Network(_)), "{err}");
}

#[test]
fn unreachable_endpoint_is_network_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = provider(&format!("http://127.0.0.1:{port}"), 0, None)
        .query(&annotation(), "sort")
        .unwrap_err();
    assert!(matches!(err, PromptError::Network(_)), "{err}");
}

#[test]
fn api_key_from_named_variable() {
    std::env::set_var("WAYPOINT_RL_TEST_KEY", "sekrit");
    let server = serve(vec![(200, "[[0,0,0],[0,0,1]]".into())]);
    provider(&server.url, 0, Some("WAYPOINT_RL_TEST_KEY"))
        .query(&annotation(), "sort")
        .unwrap();
    assert_eq!(server.requests.lock().unwrap()[0].0.as_deref(), Some("Bearer sekrit"));
    let err = provider(&server.url, 0, Some("WAYPOINT_RL_TEST_KEY_UNSET"))
        .query(&annotation(), "sort")
        .unwrap_err();
    assert!(matches!(err, PromptError::MissingApiKey(_)));
}
