//! OpenAI-compatible completion client: `POST {endpoint}/v1/completions`.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{postprocess, BackendDescriptor, Credential, TextGenerator, EMPTY_COMPLETION_RETRIES};
use crate::error::{Error, Result};

/// Admits at most `capacity` acquisitions in any trailing `window`.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    issued: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(capacity: usize, window: Duration) -> Self {
        RateLimiter {
            capacity: capacity.max(1),
            window,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    pub fn per_minute(requests: u32) -> Self {
        Self::new(requests as usize, Duration::from_secs(60))
    }

    /// Blocks until a request may be issued, then records it.
    pub fn acquire(&self) -> Instant {
        loop {
            let wait = {
                let mut issued = self.issued.lock().unwrap();
                let now = Instant::now();
                while issued.front().is_some_and(|&t| now.duration_since(t) >= self.window) {
                    issued.pop_front();
                }
                if issued.len() < self.capacity {
                    issued.push_back(now);
                    return now;
                }
                self.window - now.duration_since(*issued.front().unwrap())
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
    n: u32,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
}

pub struct HttpBackend {
    descriptor: BackendDescriptor,
    credential: Credential,
    url: String,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
    requests: AtomicU64,
}

enum Attempt {
    Retryable(String),
    Fatal(String),
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor, credential: Credential) -> Result<Self> {
        let endpoint = descriptor
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("backend `{}` has no endpoint", descriptor.plm_id)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(descriptor.limits.timeout_secs))
            .build()
            .map_err(|e| Error::backend(&descriptor.plm_id, e.to_string()))?;
        Ok(HttpBackend {
            url: format!("{}/v1/completions", endpoint.trim_end_matches('/')),
            limiter: RateLimiter::per_minute(descriptor.limits.requests_per_minute),
            credential,
            client,
            descriptor,
            requests: AtomicU64::new(0),
        })
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<String, Attempt> {
        let body = CompletionRequest {
            model: self.descriptor.model_name.as_deref().unwrap_or_default(),
            prompt,
            temperature: self.descriptor.decoding.temperature,
            top_p: self.descriptor.decoding.top_p,
            max_tokens: self.descriptor.decoding.max_new_tokens,
            n: 1,
        };
        self.limiter.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let response = self
            .client
            .post(&self.url)
            .header(reqwest::header::AUTHORIZATION, self.credential.bearer())
            .json(&body)
            .send()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: CompletionResponse = response
            .json()
            .map_err(|e| Attempt::Fatal(format!("malformed completion response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| Attempt::Fatal("completion response has no choices".into()))
    }

    /// One completion, retrying transport failures with exponential backoff.
    fn complete(&self, prompt: &str) -> Result<String> {
        let limits = &self.descriptor.limits;
        let mut attempt = 0;
        loop {
            match self.request_once(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(message)) => return Err(Error::backend(&self.descriptor.plm_id, message)),
                Err(Attempt::Retryable(message)) => {
                    if attempt >= limits.max_retries {
                        return Err(Error::backend(
                            &self.descriptor.plm_id,
                            format!("giving up after {} retries: {message}", limits.max_retries),
                        ));
                    }
                    let backoff = limits.retry_backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{}: {message}; retrying in {backoff} ms", self.descriptor.plm_id);
                    std::thread::sleep(Duration::from_millis(backoff));
                    attempt += 1;
                }
            }
        }
    }

    fn one_sample(&self, prompt: &str) -> Result<String> {
        for _ in 0..=EMPTY_COMPLETION_RETRIES {
            if let Some(text) = postprocess(&self.complete(prompt)?) {
                return Ok(text);
            }
        }
        Err(Error::backend(
            &self.descriptor.plm_id,
            format!("empty completion after {EMPTY_COMPLETION_RETRIES} regenerations"),
        ))
    }
}

impl TextGenerator for HttpBackend {
    fn plm_id(&self) -> &str {
        &self.descriptor.plm_id
    }

    fn generate(&self, prompt: &str, count: usize, _first_ordinal: u64) -> Result<Vec<String>> {
        if count == 0 {
            return Err(Error::InvalidInput("generation count must be at least 1".into()));
        }
        let workers = self.descriptor.limits.max_concurrency.clamp(1, count);
        let results: Vec<Vec<(usize, Result<String>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..count)
                            .step_by(workers)
                            .map(|i| (i, self.one_sample(prompt)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("request worker panicked")).collect()
        });
        let mut ordered: Vec<(usize, Result<String>)> = results.into_iter().flatten().collect();
        ordered.sort_by_key(|(i, _)| *i);
        ordered.into_iter().map(|(_, r)| r).collect()
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}
