//! VLM client against an in-process HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use chanprobe::attribution::{
    JudgmentBackend, PromptStore, PromptVars, RelabelOutcome, RelabelQuery, TriptychQuery, VlmBackend,
    VlmConfig, RELABEL_TEMPLATE_ID,
};
use chanprobe::{Colorspace, ImageTensor, PairVote};

/// Serves the canned `(status, body)` replies in order, one per connection,
/// and forwards every request body it saw.
fn stub(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(String::from_utf8(buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), rx)
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn backend(endpoint: String, retries: u32) -> VlmBackend {
    VlmBackend::new(
        VlmConfig {
            endpoint,
            max_retries: retries,
            retry_backoff_ms: 0,
            timeout_secs: 5,
            api_key: Some("test-key".into()),
            ..Default::default()
        },
        PromptStore::default(),
    )
    .unwrap()
}

fn query() -> TriptychQuery {
    let a = ImageTensor::filled(8, 8, Colorspace::Rgb, 0.2).unwrap();
    let b = ImageTensor::filled(8, 8, Colorspace::Rgb, 0.6).unwrap();
    TriptychQuery::new(a, b, 0.2, "eyeglasses", None).unwrap()
}

#[test]
fn parses_pair_answer_and_sends_triptych() {
    let (url, seen) = stub(vec![(200, chat(r#"{"answer":"no, eyeglasses remain the same."}"#))]);
    let j = backend(url, 0).judge_pair(&query()).unwrap();
    assert_eq!(j.outcome, PairVote::NoRelevantChange);
    assert!(j.raw_response.unwrap().contains("remain the same"));
    let body: serde_json::Value = serde_json::from_str(&seen.recv().unwrap()).unwrap();
    let content = &body["messages"][0]["content"];
    assert!(content[0]["text"].as_str().unwrap().contains("presence of eyeglasses"));
    assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn malformed_reply_is_ambiguous() {
    let (url, _) = stub(vec![(200, chat("I cannot tell."))]);
    let j = backend(url, 0).judge_pair(&query()).unwrap();
    assert_eq!(j.outcome, PairVote::Ambiguous);
    assert_eq!(j.raw_response.as_deref(), Some("I cannot tell."));
}

#[test]
fn transport_failures_are_retried_then_ambiguous() {
    let (url, _) = stub(vec![
        (500, "{}".into()),
        (200, chat(r#"{"answer": "yes, eyeglasses are added/removed"}"#)),
    ]);
    assert_eq!(backend(url, 1).judge_pair(&query()).unwrap().outcome, PairVote::RelevantChange);

    let (url, _) = stub(vec![(503, "{}".into()), (503, "{}".into())]);
    let j = backend(url, 1).judge_pair(&query()).unwrap();
    assert_eq!(j.outcome, PairVote::Ambiguous);
    assert!(j.error.unwrap().contains("503"));
}

#[test]
fn relabel_reads_the_label_key() {
    let (url, _) = stub(vec![(200, chat(r#"{"glasses":"Ambiguous"}"#)), (200, chat(r#"{"glasses":"Yes"}"#))]);
    let b = backend(url, 0);
    let q = RelabelQuery {
        image: ImageTensor::filled(8, 8, Colorspace::Rgb, 0.5).unwrap(),
        task_attribute: PromptVars::eyeglasses().attribute,
        prompt_template_id: RELABEL_TEMPLATE_ID.into(),
        state: None,
    };
    assert_eq!(b.relabel(&q).unwrap().outcome, RelabelOutcome::Ambiguous);
    assert_eq!(b.relabel(&q).unwrap().outcome, RelabelOutcome::Positive);
    assert!(!b.deterministic());
}
