//! Minimal chat-completion client.
//!
//! Requests are `{model, messages: [{role, content}], temperature: 0}` JSON
//! posted to `<base_url>/chat/completions`; the reply text is the first
//! choice's message content. The byte-level exchange goes through a
//! [`Transport`], so tests can swap in [`MockTransport`] and inspect exactly
//! what would have been sent.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_API_KEY_ENV: &str = "MINDCRAFT_LLM_API_KEY";
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Moves one serialized request to the endpoint and returns the raw response body.
pub trait Transport: Send + Sync {
    fn post(&self, body: &[u8]) -> Result<Vec<u8>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60.0,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.base_url.is_empty() {
            return Err(Error::InvalidInput("endpoint base URL is empty".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// HTTP transport over a blocking reqwest client.
pub struct HttpTransport {
    http: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the API key from the configured environment variable; an unset
    /// or empty variable sends no Authorization header.
    pub fn from_config(config: &LlmEndpointConfig) -> Result<Self> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            http,
            url: config.completions_url(),
            api_key,
        })
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &[u8]) -> Result<Vec<u8>> {
        let mut req = self
            .http
            .post(&self.url)
            .header("Content-Type", "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Transport(format!(
                "HTTP {}: {}",
                status.as_u16(),
                String::from_utf8_lossy(&bytes)
            )));
        }
        Ok(bytes.to_vec())
    }
}

/// Scripted in-process endpoint. Each call pops the next scripted reply and
/// records the request body it was given.
#[derive(Default)]
pub struct MockTransport {
    replies: Mutex<VecDeque<std::result::Result<String, String>>>,
    requests: Mutex<Vec<Vec<u8>>>,
}

impl MockTransport {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mock = Self::default();
        for r in replies {
            mock.push_reply(r);
        }
        mock
    }

    /// Queues a successful completion with this content.
    pub fn push_reply(&self, content: impl Into<String>) {
        self.replies.lock().unwrap().push_back(Ok(content.into()));
    }

    /// Queues a transport failure.
    pub fn push_failure(&self, message: impl Into<String>) {
        self.replies.lock().unwrap().push_back(Err(message.into()));
    }

    /// Raw request bodies in arrival order.
    pub fn requests(&self) -> Vec<Vec<u8>> {
        self.requests.lock().unwrap().clone()
    }

    pub fn parsed_requests(&self) -> Vec<ChatRequest> {
        self.requests()
            .iter()
            .map(|b| serde_json::from_slice(b).expect("client sends valid JSON"))
            .collect()
    }
}

impl Transport for MockTransport {
    fn post(&self, body: &[u8]) -> Result<Vec<u8>> {
        self.requests.lock().unwrap().push(body.to_vec());
        match self.replies.lock().unwrap().pop_front() {
            Some(Ok(content)) => Ok(serde_json::to_vec(&serde_json::json!({
                "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
            }))?),
            Some(Err(msg)) => Err(Error::Transport(msg)),
            None => Err(Error::Transport(
                "mock endpoint has no scripted reply left".into(),
            )),
        }
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn post(&self, body: &[u8]) -> Result<Vec<u8>> {
        (**self).post(body)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn post(&self, body: &[u8]) -> Result<Vec<u8>> {
        (**self).post(body)
    }
}

pub struct ChatClient<T> {
    transport: T,
    model: String,
    max_retries: u32,
    backoff: Duration,
}

impl<T: Transport> ChatClient<T> {
    pub fn new(transport: T, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            max_retries: DEFAULT_MAX_RETRIES,
            backoff: Duration::ZERO,
        }
    }

    pub fn with_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    /// Sleep between attempts, doubled after each failure.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn request(&self, system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature: 0.0,
        }
    }

    /// Sends one system+user exchange and returns the completion text.
    /// Transport failures are retried up to `max_retries` times; a malformed
    /// response body is not.
    pub fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = serde_json::to_vec(&self.request(system, user))?;
        let mut delay = self.backoff;
        let mut attempt = 0;
        let raw = loop {
            match self.transport.post(&body) {
                Ok(raw) => break raw,
                Err(e) if attempt >= self.max_retries => {
                    return Err(Error::Transport(format!(
                        "giving up after {} attempts: {e}",
                        attempt + 1
                    )))
                }
                Err(_) => {
                    attempt += 1;
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        };
        let resp: ChatResponse = serde_json::from_slice(&raw)
            .map_err(|e| Error::Transport(format!("malformed completion response: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Transport("completion response has no message content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        let mock = MockTransport::new(["hello"]);
        let client = ChatClient::new(&mock, "m1");
        assert_eq!(client.complete("sys", "usr").unwrap(), "hello");
        let body: serde_json::Value = serde_json::from_slice(&mock.requests()[0]).unwrap();
        assert_eq!(
            body,
            serde_json::json!({
                "model": "m1",
                "messages": [
                    {"role": "system", "content": "sys"},
                    {"role": "user", "content": "usr"}
                ],
                "temperature": 0.0
            })
        );
    }

    #[test]
    fn retries_then_succeeds() {
        let mock = MockTransport::default();
        mock.push_failure("boom");
        mock.push_failure("boom");
        mock.push_reply("ok");
        let client = ChatClient::new(&mock, "m").with_retries(2);
        assert_eq!(client.complete("s", "u").unwrap(), "ok");
        assert_eq!(mock.requests().len(), 3);
        // every attempt carries identical bytes
        let reqs = mock.requests();
        assert!(reqs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn gives_up_after_retries() {
        let mock = MockTransport::default();
        for _ in 0..5 {
            mock.push_failure("down");
        }
        let client = ChatClient::new(&mock, "m").with_retries(3);
        let err = client.complete("s", "u").unwrap_err();
        assert!(matches!(err, Error::Transport(ref m) if m.contains("4 attempts")));
        assert_eq!(mock.requests().len(), 4);
    }

    struct Fixed(&'static str);

    impl Transport for Fixed {
        fn post(&self, _body: &[u8]) -> Result<Vec<u8>> {
            Ok(self.0.as_bytes().to_vec())
        }
    }

    #[test]
    fn malformed_responses() {
        assert!(ChatClient::new(Fixed("not json"), "m")
            .complete("s", "u")
            .is_err());
        assert!(ChatClient::new(Fixed(r#"{"choices":[]}"#), "m")
            .complete("s", "u")
            .is_err());
        let ok = ChatClient::new(
            Fixed(r#"{"id":"x","choices":[{"message":{"role":"assistant","content":"fine"}}]}"#),
            "m",
        );
        assert_eq!(ok.complete("s", "u").unwrap(), "fine");
    }

    #[test]
    fn endpoint_config() {
        let mut c = LlmEndpointConfig::new("http://host:8000/v1/", "m");
        assert_eq!(c.completions_url(), "http://host:8000/v1/chat/completions");
        assert_eq!(c.api_key_env, "MINDCRAFT_LLM_API_KEY");
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
    }
}
