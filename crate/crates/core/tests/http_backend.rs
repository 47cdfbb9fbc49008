//! Exercises the chat-completion client against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use coconstruct_core::backends::{
    BackendConfig, BackendError, Generator, GeneratorRequest, HttpChatGenerator, HttpChatJudge, Judge, JudgeRequest,
    Side,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Captured {
    authorization: Option<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` reply per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, reply) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Captured {
                authorization,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn completion(contents: &[&str]) -> String {
    let choices: Vec<Value> = contents
        .iter()
        .map(|c| json!({"index": 0, "message": {"role": "assistant", "content": c}}))
        .collect();
    json!({ "choices": choices }).to_string()
}

fn config(url: &str, env_var: Option<&str>) -> BackendConfig {
    let mut config = BackendConfig::http_chat(url, "test-model");
    config.auth_env_var = env_var.map(str::to_string);
    config.retry_base_ms = 1;
    config.timeout_ms = 5_000;
    config
}

fn request(level: usize, k: usize) -> GeneratorRequest {
    GeneratorRequest {
        target_level: level,
        parent_content: "Sort names alphabetically.".into(),
        context: "Expert critique: keep it short.".into(),
        sample_count: k,
        temperature: 0.7,
        seed: 1,
    }
}

#[test]
fn generator_sends_chat_request_with_bearer_token() {
    std::env::set_var("COCONSTRUCT_HTTP_TEST_TOKEN", "token-abc");
    let (url, seen) = serve(vec![(200, completion(&["first", "second", "third"]))]);
    let generator = HttpChatGenerator::new("live", &config(&url, Some("COCONSTRUCT_HTTP_TEST_TOKEN"))).unwrap();
    let samples = generator.generate(&request(1, 3)).unwrap();
    assert_eq!(samples, ["first", "second", "third"]);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer token-abc"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["n"], 3);
    assert_eq!(body["temperature"], 0.7);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[1]["role"], "user");
    let user = messages[1]["content"].as_str().unwrap();
    assert!(user.contains("Sort names alphabetically."));
    assert!(user.contains("keep it short"));
}

#[test]
fn short_batches_are_topped_up() {
    let (url, seen) = serve(vec![(200, completion(&["one"])), (200, completion(&["two", "three"]))]);
    let generator = HttpChatGenerator::new("live", &config(&url, None)).unwrap();
    let samples = generator.generate(&request(2, 3)).unwrap();
    assert_eq!(samples, ["one", "two", "three"]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[1].body["n"], 2);
    assert!(seen[0].authorization.is_none());
}

#[test]
fn transient_status_is_retried() {
    let (url, seen) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, completion(&["ok"])),
    ]);
    let generator = HttpChatGenerator::new("live", &config(&url, None)).unwrap();
    assert_eq!(generator.generate(&request(0, 1)).unwrap(), ["ok"]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = serve(vec![(500, "{}".into()); 4]);
    let generator = HttpChatGenerator::new("live", &config(&url, None)).unwrap();
    let err = generator.generate(&request(0, 1)).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 500, .. }));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into()), (200, completion(&["never"]))]);
    let generator = HttpChatGenerator::new("live", &config(&url, None)).unwrap();
    let err = generator.generate(&request(0, 1)).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn empty_completion_is_an_error() {
    let (url, _) = serve(vec![(200, completion(&[""])); 3]);
    let generator = HttpChatGenerator::new("live", &config(&url, None)).unwrap();
    assert!(matches!(generator.generate(&request(0, 1)), Err(BackendError::EmptyCompletion)));
}

#[test]
fn unreachable_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = config(&url, None);
    cfg.max_retries = 0;
    let generator = HttpChatGenerator::new("live", &cfg).unwrap();
    assert!(matches!(generator.generate(&request(0, 1)), Err(BackendError::Unreachable(_))));
}

#[test]
fn missing_credential_variable_is_a_config_error() {
    let (url, seen) = serve(vec![]);
    let generator = HttpChatGenerator::new("live", &config(&url, Some("COCONSTRUCT_HTTP_UNSET_VAR"))).unwrap();
    let err = generator.generate(&request(0, 1)).unwrap_err();
    assert!(matches!(err, BackendError::Config(_)));
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn judge_parses_verdict_and_retries_unparseable_replies() {
    let (url, seen) = serve(vec![
        (200, completion(&["I cannot decide."])),
        (200, completion(&["The second handles ties. [2]"])),
    ]);
    let judge = HttpChatJudge::new("live-judge", &config(&url, None)).unwrap();
    let verdict = judge
        .judge(
            &JudgeRequest {
                specification: "spec".into(),
                candidate_a: "a".into(),
                candidate_b: "b".into(),
                rubric: None,
            },
            0,
        )
        .unwrap();
    assert_eq!(verdict.winner, Side::Second);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].body["n"], 1);
}

#[test]
fn summaries_respect_the_budget() {
    let (url, _) = serve(vec![(200, completion(&["x".repeat(100).as_str()]))]);
    let generator = HttpChatGenerator::new("live", &config(&url, None)).unwrap();
    assert_eq!(generator.summarize("material", 10).unwrap().len(), 10);
}
