//! Client for OpenAI-compatible chat completion servers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::generator::{rough_token_count, FinishReason, GenerateError, GenerationRequest, GenerationResult, Generator};

pub const API_KEY_ENV: &str = "COCOA_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiClient {
    http: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Retry(GenerateError),
    Fatal(GenerateError),
}

impl OpenAiClient {
    /// `endpoint` is either a server root (`http://host:port`) or the full
    /// chat completions URL. The API key is read from `COCOA_API_KEY`.
    pub fn new(endpoint: &str, timeout: Duration, retry: RetryPolicy) -> Result<Self, GenerateError> {
        let endpoint = endpoint.trim_end_matches('/');
        let url = if endpoint.ends_with("/chat/completions") {
            endpoint.to_string()
        } else if endpoint.ends_with("/v1") {
            format!("{endpoint}/chat/completions")
        } else {
            format!("{endpoint}/v1/chat/completions")
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GenerateError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            http,
            url,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn body(request: &GenerationRequest) -> serde_json::Value {
        let mut body = json!({
            "model": request.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value, attempts: u32) -> Result<(String, Option<String>, Option<Usage>), Attempt> {
        let mut req = self.http.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                GenerateError::Timeout { attempts }
            } else {
                GenerateError::Transport { attempts, message: e.to_string() }
            })
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            let err = GenerateError::Status { status: status.as_u16(), body };
            return Err(if status.is_server_error() { Attempt::Retry(err) } else { Attempt::Fatal(err) });
        }
        let bytes = resp.bytes().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                GenerateError::Timeout { attempts }
            } else {
                GenerateError::Transport { attempts, message: e.to_string() }
            })
        })?;
        let parsed: ChatResponse =
            serde_json::from_slice(&bytes).map_err(|e| Attempt::Fatal(GenerateError::Schema(e.to_string())))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Fatal(GenerateError::Schema("response has no choices".into())))?;
        Ok((choice.message.content.unwrap_or_default(), choice.finish_reason, parsed.usage))
    }
}

impl Generator for OpenAiClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        let body = Self::body(request);
        let mut retries = 0;
        loop {
            match self.attempt(&body, retries + 1) {
                Ok((text, finish, usage)) => {
                    let (prompt_tokens, completion_tokens) = match usage {
                        Some(u) => (u.prompt_tokens, u.completion_tokens),
                        None => (rough_token_count(&request.prompt), rough_token_count(&text)),
                    };
                    return Ok(GenerationResult {
                        text,
                        prompt_tokens,
                        completion_tokens,
                        finish_reason: FinishReason::from_wire(finish.as_deref()),
                        retries,
                    });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    if retries >= self.retry.max_retries {
                        return Err(e);
                    }
                    log::warn!("generation attempt {} failed: {e}; retrying", retries + 1);
                    std::thread::sleep(self.retry.delay(retries));
                    retries += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::RoleTag;

    #[test]
    fn url_forms() {
        let t = Duration::from_secs(1);
        let p = RetryPolicy::default();
        assert_eq!(OpenAiClient::new("http://h:1", t, p).unwrap().url(), "http://h:1/v1/chat/completions");
        assert_eq!(OpenAiClient::new("http://h:1/v1/", t, p).unwrap().url(), "http://h:1/v1/chat/completions");
        assert_eq!(
            OpenAiClient::new("http://h:1/x/chat/completions", t, p).unwrap().url(),
            "http://h:1/x/chat/completions"
        );
    }

    #[test]
    fn body_shape() {
        let mut r = GenerationRequest::new("hi", "m", RoleTag::Unified);
        let b = OpenAiClient::body(&r);
        assert_eq!(b["messages"][0]["content"], "hi");
        assert_eq!(b["max_tokens"], 1024);
        assert!(b.get("stop").is_none());
        r.stop_sequences = vec!["###".into()];
        assert_eq!(OpenAiClient::body(&r)["stop"][0], "###");
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy { max_retries: 9, base_delay_ms: 100, max_delay_ms: 1000 };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(400));
        assert_eq!(p.delay(8), Duration::from_millis(1000));
        assert_eq!(p.delay(200), Duration::from_millis(1000));
    }
}
