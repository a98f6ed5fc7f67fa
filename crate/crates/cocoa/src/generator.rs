//! Text generation backends and the shared gateway.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::mock::{MockGenerator, MockRule, MockScript};
pub use crate::openai::{OpenAiClient, RetryPolicy};

pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_UNIFIED_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    InternalAgent,
    ExternalAgent,
    DecisionAgent,
    Unified,
}

impl RoleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::InternalAgent => "internal_agent",
            RoleTag::ExternalAgent => "external_agent",
            RoleTag::DecisionAgent => "decision_agent",
            RoleTag::Unified => "unified",
        }
    }
}

impl std::fmt::Display for RoleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub model_name: String,
    pub role_tag: RoleTag,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, model_name: impl Into<String>, role_tag: RoleTag) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_sequences: Vec::new(),
            model_name: model_name.into(),
            role_tag,
        }
    }

    fn check(&self) -> Result<(), GenerateError> {
        if self.prompt.is_empty() {
            return Err(GenerateError::InvalidRequest("prompt must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GenerateError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GenerateError::InvalidRequest("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

impl FinishReason {
    pub fn from_wire(s: Option<&str>) -> Self {
        match s {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub finish_reason: FinishReason,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerateError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Schema(String),
    #[error("no mock rule matches the prompt for role {0}")]
    NoRule(RoleTag),
    #[error("mock script exhausted at call {call} for role {role}")]
    ScriptExhausted { call: usize, role: RoleTag },
    #[error("{0} generation returned empty output")]
    EmptyOutput(RoleTag),
}

impl GenerateError {
    /// True when the backend could not be reached at all.
    pub fn is_unreachable(&self) -> bool {
        matches!(self, GenerateError::Transport { .. } | GenerateError::Timeout { .. })
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerateError>;
}

impl<F> Generator for F
where
    F: Fn(&GenerationRequest) -> Result<GenerationResult, GenerateError> + Send + Sync,
{
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        self(request)
    }
}

/// Whitespace token count, used by backends that report no usage.
pub fn rough_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Routes requests to a backend by role, bounding in-flight calls.
///
/// Empty completions are turned into [`GenerateError::EmptyOutput`] here so
/// every backend gets the same treatment.
pub struct Gateway {
    default: Arc<dyn Generator>,
    overrides: HashMap<RoleTag, Arc<dyn Generator>>,
    limit: Semaphore,
    concurrency: usize,
}

impl Gateway {
    pub fn new(default: Arc<dyn Generator>, concurrency: usize) -> Self {
        let concurrency = concurrency.max(1);
        Self {
            default,
            overrides: HashMap::new(),
            limit: Semaphore::new(concurrency),
            concurrency,
        }
    }

    pub fn with_role(mut self, role: RoleTag, generator: Arc<dyn Generator>) -> Self {
        self.overrides.insert(role, generator);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        request.check()?;
        let backend = self.overrides.get(&request.role_tag).unwrap_or(&self.default);
        let result = {
            let _permit = self.limit.acquire();
            backend.generate(request)?
        };
        if result.text.trim().is_empty() {
            return Err(GenerateError::EmptyOutput(request.role_tag));
        }
        Ok(result)
    }
}
