use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use fusegen::backends::{
    BackendDescriptor, BackendKind, Credential, Decoding, HttpBackend, RateLimiter, RequestLimits, TextGenerator,
};
use fusegen::Error;

const TOKEN: &str = "test-secret-token";

#[derive(Debug, Clone)]
struct Recorded {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves the scripted `(status, body)` replies in order, one per connection,
/// and records each request. Replies past the script repeat the last entry.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Recorded>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let address = format!("http://{}", listener.local_addr().unwrap());
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&log);
    thread::spawn(move || {
        for (index, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            sink.lock().unwrap().push(Recorded {
                path: request_line.split_whitespace().nth(1).unwrap_or_default().to_string(),
                authorization,
                body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
            });
            let (status, reply) = &script[index.min(script.len() - 1)];
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (address, log)
}

fn completion(text: &str) -> (u16, String) {
    (200, serde_json::json!({ "choices": [{ "text": text }] }).to_string())
}

fn backend(endpoint: &str, max_retries: usize) -> HttpBackend {
    let descriptor = BackendDescriptor {
        plm_id: "remote".into(),
        kind: BackendKind::Http,
        endpoint: Some(format!("{endpoint}/")),
        model_name: Some("tiny-model".into()),
        decoding: Decoding {
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 64,
        },
        limits: RequestLimits {
            max_retries,
            requests_per_minute: 6000,
            max_concurrency: 1,
            timeout_secs: 5,
            retry_backoff_ms: 1,
        },
        mock: None,
    };
    HttpBackend::new(descriptor, Credential::new(TOKEN)).unwrap()
}

#[test]
fn request_shape_and_postprocessing() {
    let (endpoint, log) = serve(vec![completion("  \"A fine film.\"\n\nQ: next")]);
    let texts = backend(&endpoint, 0).generate("Write a review.", 1, 0).unwrap();
    assert_eq!(texts, vec!["A fine film.".to_string()]);
    let recorded = log.lock().unwrap()[0].clone();
    assert_eq!(recorded.path, "/v1/completions");
    assert_eq!(recorded.authorization.as_deref(), Some(format!("Bearer {TOKEN}").as_str()));
    assert_eq!(recorded.body["model"], "tiny-model");
    assert_eq!(recorded.body["prompt"], "Write a review.");
    assert_eq!(recorded.body["temperature"], 0.7);
    assert_eq!(recorded.body["top_p"], 0.9);
    assert_eq!(recorded.body["max_tokens"], 64);
    assert_eq!(recorded.body["n"], 1);
}

#[test]
fn throttling_and_server_errors_are_retried() {
    let (endpoint, log) = serve(vec![(429, "{}".into()), (503, "{}".into()), completion("ok text")]);
    let texts = backend(&endpoint, 3).generate("p", 1, 0).unwrap();
    assert_eq!(texts, vec!["ok text".to_string()]);
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (endpoint, log) = serve(vec![(500, "{}".into())]);
    let err = backend(&endpoint, 2).generate("p", 1, 0).unwrap_err();
    assert!(matches!(err, Error::Backend { .. }), "{err}");
    assert_eq!(log.lock().unwrap().len(), 3);
    assert!(!err.to_string().contains(TOKEN));
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, log) = serve(vec![(401, "{\"error\":\"bad key\"}".into())]);
    let err = backend(&endpoint, 5).generate("p", 1, 0).unwrap_err();
    assert!(err.to_string().contains("401"), "{err}");
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn empty_completions_are_regenerated() {
    let (endpoint, log) = serve(vec![completion("   \n\n"), completion("\"\""), completion("second try")]);
    let texts = backend(&endpoint, 0).generate("p", 1, 0).unwrap();
    assert_eq!(texts, vec!["second try".to_string()]);
    assert_eq!(log.lock().unwrap().len(), 3);

    let (endpoint, _) = serve(vec![completion(" ")]);
    assert!(backend(&endpoint, 0).generate("p", 1, 0).is_err());
}

#[test]
fn credential_never_appears_in_debug_output() {
    let credential = Credential::new(TOKEN);
    assert!(!format!("{credential:?}").contains(TOKEN));
}

#[test]
fn rate_limiter_holds_the_window() {
    let limiter = RateLimiter::new(2, Duration::from_millis(150));
    let start = Instant::now();
    let stamps: Vec<Instant> = (0..5).map(|_| limiter.acquire()).collect();
    for pair in stamps.windows(3) {
        assert!(pair[2].duration_since(pair[0]) >= Duration::from_millis(150));
    }
    assert!(start.elapsed() >= Duration::from_millis(300));
}
