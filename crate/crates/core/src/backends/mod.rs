//! Text-generation backends: an OpenAI-compatible completion client and a
//! deterministic mock generator.

mod http;
mod mock;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::{HttpBackend, RateLimiter};
pub use mock::{MockBackend, MockGeneration, MockProfile, MockProfileConfig, MockWorld, MockWorldConfig, TextKind};

/// Maximum regenerations of an empty completion before giving up.
pub const EMPTY_COMPLETION_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 1.0,
            top_p: 0.9,
            max_new_tokens: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestLimits {
    pub max_retries: usize,
    pub requests_per_minute: u32,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    pub retry_backoff_ms: u64,
}

impl Default for RequestLimits {
    fn default() -> Self {
        RequestLimits {
            max_retries: 3,
            requests_per_minute: 60,
            max_concurrency: 4,
            timeout_secs: 60,
            retry_backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub plm_id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub limits: RequestLimits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockProfileConfig>,
}

impl BackendDescriptor {
    pub fn mock(plm_id: impl Into<String>, profile: MockProfileConfig) -> Self {
        BackendDescriptor {
            plm_id: plm_id.into(),
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: None,
            decoding: Decoding::default(),
            limits: RequestLimits::default(),
            mock: Some(profile),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let id = &self.plm_id;
        if id.is_empty() || id.contains(':') || id.contains('/') {
            problems.push(format!("backend id `{id}` must be nonempty without ':' or '/'"));
        }
        let d = &self.decoding;
        if !(d.temperature >= 0.0) {
            problems.push(format!("backend `{id}`: temperature must be ≥ 0"));
        }
        if !(d.top_p > 0.0 && d.top_p <= 1.0) {
            problems.push(format!("backend `{id}`: top_p must be in (0, 1]"));
        }
        if d.max_new_tokens == 0 {
            problems.push(format!("backend `{id}`: max_new_tokens must be positive"));
        }
        if self.limits.requests_per_minute == 0 {
            problems.push(format!("backend `{id}`: requests_per_minute must be positive"));
        }
        if self.limits.max_concurrency == 0 {
            problems.push(format!("backend `{id}`: max_concurrency must be positive"));
        }
        match self.kind {
            BackendKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    problems.push(format!("backend `{id}`: http kind requires `endpoint`"));
                }
                if self.model_name.as_deref().is_none_or(str::is_empty) {
                    problems.push(format!("backend `{id}`: http kind requires `model_name`"));
                }
            }
            BackendKind::Mock => match &self.mock {
                Some(profile) => problems.extend(profile.validate().into_iter().map(|p| format!("backend `{id}`: {p}"))),
                None => problems.push(format!("backend `{id}`: mock kind requires a [mock] profile")),
            },
        }
        problems
    }
}

/// Bearer token for one backend. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential(String);

impl Credential {
    pub fn new(token: impl Into<String>) -> Self {
        Credential(token.into())
    }

    pub fn bearer(&self) -> String {
        format!("Bearer {}", self.0)
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credential(<redacted>)")
    }
}

/// `FUSEGEN_API_KEY_<PLM_ID>` with the id uppercased and non-alphanumerics mapped to `_`.
pub fn credential_variable(plm_id: &str) -> String {
    let suffix: String = plm_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("FUSEGEN_API_KEY_{suffix}")
}

pub fn resolve_credentials(descriptor: &BackendDescriptor) -> Result<Option<Credential>> {
    resolve_credentials_with(descriptor, |name| std::env::var(name).ok())
}

/// Same as [`resolve_credentials`] with an injectable variable lookup.
pub fn resolve_credentials_with(
    descriptor: &BackendDescriptor,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<Option<Credential>> {
    match descriptor.kind {
        BackendKind::Mock => Ok(None),
        BackendKind::Http => {
            let name = credential_variable(&descriptor.plm_id);
            match lookup(&name) {
                Some(token) if !token.is_empty() => Ok(Some(Credential::new(token))),
                _ => Err(Error::Config(format!(
                    "backend `{}` needs an API key in environment variable {name}",
                    descriptor.plm_id
                ))),
            }
        }
    }
}

/// Cleans a raw completion: drops leading whitespace, cuts at the first blank
/// line, trims, and strips one pair of surrounding quotes. `None` when nothing is left.
pub fn postprocess(raw: &str) -> Option<String> {
    let text = raw.trim_start();
    let mut kept = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            break;
        }
        kept.push(line);
    }
    let mut text = kept.join("\n").trim().to_string();
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')] {
        if text.chars().count() >= 2 && text.starts_with(open) && text.ends_with(close) {
            text = text[open.len_utf8()..text.len() - close.len_utf8()].trim().to_string();
            break;
        }
    }
    (!text.is_empty()).then_some(text)
}

/// Uniform generation interface. `first_ordinal` numbers the outputs so that
/// deterministic backends can be resumed mid-stream.
pub trait TextGenerator: Send + Sync {
    fn plm_id(&self) -> &str;

    fn generate(&self, prompt: &str, count: usize, first_ordinal: u64) -> Result<Vec<String>>;

    /// Requests issued so far.
    fn request_count(&self) -> u64 {
        0
    }
}

/// Builds the generator for a descriptor. Http backends resolve credentials here,
/// before any generation starts.
pub fn build_generator(
    descriptor: &BackendDescriptor,
    world: Option<&Arc<MockWorld>>,
    seed: u64,
) -> Result<Arc<dyn TextGenerator>> {
    match descriptor.kind {
        BackendKind::Mock => {
            let config = descriptor
                .mock
                .clone()
                .ok_or_else(|| Error::Config(format!("backend `{}` lacks a mock profile", descriptor.plm_id)))?;
            let world = world
                .cloned()
                .ok_or_else(|| Error::Config("mock backends need a [mock_world] section".into()))?;
            let profile = MockProfile::new(&descriptor.plm_id, config, &world)?;
            Ok(Arc::new(MockBackend::new(profile, world, seed)))
        }
        BackendKind::Http => {
            let credential = resolve_credentials(descriptor)?
                .ok_or_else(|| Error::Config(format!("backend `{}` has no credential", descriptor.plm_id)))?;
            Ok(Arc::new(HttpBackend::new(descriptor.clone(), credential)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn http_descriptor(id: &str) -> BackendDescriptor {
        BackendDescriptor {
            plm_id: id.into(),
            kind: BackendKind::Http,
            endpoint: Some("http://localhost:1".into()),
            model_name: Some("m".into()),
            decoding: Decoding::default(),
            limits: RequestLimits::default(),
            mock: None,
        }
    }

    #[test]
    fn postprocess_rules() {
        assert_eq!(postprocess("  \"A fine film.\"  ").as_deref(), Some("A fine film."));
        assert_eq!(postprocess("\n\nfirst line\nsecond\n\nignored").as_deref(), Some("first line\nsecond"));
        assert_eq!(postprocess("   \n  \n"), None);
        assert_eq!(postprocess("\"\""), None);
        assert_eq!(postprocess("'quoted' and more"), Some("'quoted' and more".into()));
    }

    #[test]
    fn credential_variable_names() {
        assert_eq!(credential_variable("llama-2"), "FUSEGEN_API_KEY_LLAMA_2");
        assert_eq!(credential_variable("gpt2"), "FUSEGEN_API_KEY_GPT2");
    }

    #[test]
    fn credentials_by_kind() {
        let mock = BackendDescriptor::mock("m", MockProfileConfig::default());
        assert_eq!(resolve_credentials_with(&mock, |_| None).unwrap(), None);

        let http = http_descriptor("opt");
        let cred = resolve_credentials_with(&http, |name| {
            (name == "FUSEGEN_API_KEY_OPT").then(|| "sk-test".to_string())
        })
        .unwrap()
        .unwrap();
        assert_eq!(cred.bearer(), "Bearer sk-test");
        assert_eq!(format!("{cred:?}"), "Credential(<redacted>)");

        let err = resolve_credentials_with(&http, |_| None).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("FUSEGEN_API_KEY_OPT"));
    }

    #[test]
    fn descriptor_validation() {
        let mut http = http_descriptor("x");
        assert!(http.validate().is_empty());
        http.endpoint = None;
        http.decoding.top_p = 0.0;
        assert_eq!(http.validate().len(), 2);
        let mut mock = BackendDescriptor::mock("bad:id", MockProfileConfig::default());
        mock.mock = None;
        assert_eq!(mock.validate().len(), 2);
    }
}
