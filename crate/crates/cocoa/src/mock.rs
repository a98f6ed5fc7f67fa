//! Scripted generator for offline runs and tests.
//!
//! A script is JSONL, one rule per line:
//! `{"match": "substring", "response": "..."}` or
//! `{"pattern": "regex", "response": "..."}`. By default the first rule
//! whose matcher hits the prompt answers. In strict mode rules are consumed
//! in order, and each must match the prompt it is given.

use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::generator::{rough_token_count, FinishReason, GenerateError, GenerationRequest, GenerationResult, Generator};

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mock script line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn hits(&self, prompt: &str) -> bool {
        match self {
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(r) => r.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pub matcher: Matcher,
    pub response: String,
}

impl MockRule {
    pub fn substring(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: Matcher::Substring(needle.into()), response: response.into() }
    }

    pub fn pattern(regex: &str, response: impl Into<String>) -> Result<Self, regex::Error> {
        Ok(Self { matcher: Matcher::Pattern(Regex::new(regex)?), response: response.into() })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(rename = "match")]
    substring: Option<String>,
    pattern: Option<String>,
    response: String,
}

#[derive(Debug, Clone, Default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub strict: bool,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules, strict: false }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn parse(source: &str) -> Result<Self, MockScriptError> {
        let mut rules = Vec::new();
        for (i, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| MockScriptError::Parse { line: i + 1, message };
            let raw: RawRule = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let matcher = match (raw.substring, raw.pattern) {
                (Some(s), None) => Matcher::Substring(s),
                (None, Some(p)) => Matcher::Pattern(Regex::new(&p).map_err(|e| err(e.to_string()))?),
                _ => return Err(err("exactly one of `match` or `pattern` is required".into())),
            };
            rules.push(MockRule { matcher, response: raw.response });
        }
        Ok(Self::new(rules))
    }

    pub fn load(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[derive(Debug)]
pub struct MockGenerator {
    script: MockScript,
    cursor: Mutex<usize>,
}

impl MockGenerator {
    pub fn new(script: MockScript) -> Self {
        Self { script, cursor: Mutex::new(0) }
    }

    fn pick(&self, request: &GenerationRequest) -> Result<&MockRule, GenerateError> {
        if self.script.strict {
            let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
            let call = *cursor;
            let rule = self.script.rules.get(call).ok_or(GenerateError::ScriptExhausted {
                call: call + 1,
                role: request.role_tag,
            })?;
            *cursor += 1;
            if !rule.matcher.hits(&request.prompt) {
                return Err(GenerateError::NoRule(request.role_tag));
            }
            return Ok(rule);
        }
        self.script
            .rules
            .iter()
            .find(|r| r.matcher.hits(&request.prompt))
            .ok_or(GenerateError::NoRule(request.role_tag))
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        let rule = self.pick(request)?;
        Ok(GenerationResult {
            text: rule.response.clone(),
            prompt_tokens: rough_token_count(&request.prompt),
            completion_tokens: rough_token_count(&rule.response),
            finish_reason: FinishReason::Stop,
            retries: 0,
        })
    }
}
