//! HTTP adapters against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use mmg::providers::{stage, ChatRequest, ProviderConfig, ProviderError, Providers};

/// Serves `replies` in order, one per connection, recording each request.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut payload = vec![0; len];
            reader.read_exact(&mut payload).unwrap();
            log.lock().unwrap().push(format!("{head}{}", String::from_utf8_lossy(&payload)));
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn config(url: &str) -> ProviderConfig {
    ProviderConfig {
        chat_url: format!("{url}/chat"),
        embed_url: format!("{url}/embed"),
        visual_url: format!("{url}/visual"),
        auth_env: "MMG_TEST_TOKEN_UNSET".into(),
        max_retries: 1,
        backoff_ms: 1,
        text_dim: 3,
        visual_dim: 2,
        timeout_secs: 5,
        ..ProviderConfig::default()
    }
}

fn request() -> ChatRequest {
    ChatRequest { template: "controller".into(), system: "be brief".into(), user: "Query: where?".into() }
}

#[test]
fn chat_reads_the_first_choice() {
    let (url, seen) = stub(vec![(200, r#"{"choices":[{"message":{"content":"{\"decision\":\"answer\"}"}}]}"#.into())]);
    let mut p = Providers::http(&config(&url)).unwrap();
    p.register_templates(["controller"]);
    assert_eq!(p.chat(stage::CONTROLLER, &request()).unwrap(), r#"{"decision":"answer"}"#);
    let log = seen.lock().unwrap();
    assert!(log[0].starts_with("POST /chat"));
    let body: serde_json::Value = serde_json::from_str(log[0].split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Query: where?");
    assert_eq!(body["temperature"], 0);
    assert_eq!(p.ledger.get(stage::CONTROLLER), 1);
}

#[test]
fn server_errors_are_retried_once_then_reported() {
    let (url, seen) = stub(vec![(503, "busy".into()), (500, "down".into())]);
    let mut p = Providers::http(&config(&url)).unwrap();
    p.register_templates(["controller"]);
    let err = p.chat(stage::CONTROLLER, &request()).unwrap_err();
    assert!(matches!(err, ProviderError::Status { status: 500, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 2);
    assert_eq!(p.ledger.get(stage::CONTROLLER), 1);
}

#[test]
fn embeddings_keep_order_and_check_dimension() {
    let (url, _) = stub(vec![
        (200, r#"{"data":[{"embedding":[1,0,0]},{"embedding":[0,1,0]}]}"#.into()),
        (200, r#"{"data":[{"embedding":[0.5,0.5]}]}"#.into()),
        (200, r#"{"data":[{"embedding":[1,2]}]}"#.into()),
    ]);
    let p = Providers::http(&config(&url)).unwrap();
    let v = p.embed_text(&["a".into(), "b".into()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    assert_eq!(p.embed_query_visual("a red cup").unwrap(), vec![0.5, 0.5]);
    assert!(p.embed_text(&["c".into()]).is_err());
}
