//! Shared fixtures: a small synthetic world (corpus, queries, scripted
//! generator) and a one-route HTTP server.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cocoa::generator::{Gateway, MockGenerator, MockRule, MockScript};
use cocoa_core::prompt::format_unified_output;
use cocoa_core::{Passage, Query};
use serde_json::json;

pub fn country(i: usize) -> String {
    format!("Zorland{i}")
}

pub fn capital(i: usize) -> String {
    format!("Vexcity{i}")
}

pub fn question(i: usize) -> String {
    format!("What is the capital of {}?", country(i))
}

pub fn queries(n: usize) -> Vec<Query> {
    (0..n)
        .map(|i| Query::new(format!("q{i:02}"), question(i)).unwrap().with_golds([capital(i)]))
        .collect()
}

pub fn passages(n: usize) -> Vec<Passage> {
    let mut out = Vec::new();
    for i in 0..n {
        out.push(Passage::new(format!("p{i:02}"), country(i), format!("The capital of {} is {}.", country(i), capital(i))).unwrap());
        out.push(
            Passage::new(format!("d{i:02}"), "", format!("{} exports copper and wool to its neighbours.", country(i))).unwrap(),
        );
    }
    out
}

/// Zero-shot / internal candidate is wrong for odd queries; the decision is
/// wrong for every fifth query.
pub fn internal_guess(i: usize) -> String {
    if i % 2 == 1 {
        "Unknown".to_string()
    } else {
        capital(i)
    }
}

pub fn final_answer(i: usize) -> String {
    if i % 5 == 4 {
        "Nowhere".to_string()
    } else {
        capital(i)
    }
}

/// (regex, response) pairs for query `i`, most specific stage first.
pub fn rules_for(i: usize) -> Vec<(String, String)> {
    let q = regex_escape(&question(i));
    let (c, cap, ans) = (country(i), capital(i), final_answer(i));
    vec![
        (
            format!(r"(?s)1\. First, provide background.*{q}"),
            format_unified_output(
                &format!("{c} is a small country; its capital is {cap}."),
                &format!("Passage 1 says the capital of {c} is {cap}."),
                &format!("Both sources name {cap}."),
                &ans,
            ),
        ),
        (
            format!(r"(?s)choose the best prediction.*{q}"),
            format!("### Thingking: The passages and background agree on {cap}.\n### Short Answer: {ans}"),
        ),
        (
            format!(r"(?s)Please provide background.*{q}"),
            format!("### Background: {c} is a small country whose capital is {cap}."),
        ),
        (
            format!(r"(?s)generate a summary that meets.*{q}"),
            format!("### Summary: The passages state that the capital of {c} is {cap}."),
        ),
        (format!(r"(?s){q}\nPlease think step by step"), format!("{c} is known for {cap}.\n{}", internal_guess(i))),
        (format!(r"(?s)^### Passages:.*{q}"), cap.clone()),
        (format!(r"(?s)^### Instruction:\n Answer.*{q}"), internal_guess(i)),
    ]
}

fn regex_escape(s: &str) -> String {
    regex::escape(s)
}

pub fn world_script(n: usize) -> MockScript {
    let rules = (0..n)
        .flat_map(rules_for)
        .map(|(p, r)| MockRule::pattern(&p, r).unwrap())
        .collect();
    MockScript::new(rules)
}

pub fn world_script_jsonl(n: usize) -> String {
    (0..n)
        .flat_map(rules_for)
        .map(|(p, r)| json!({"pattern": p, "response": r}).to_string() + "\n")
        .collect()
}

pub fn world_gateway(n: usize, concurrency: usize) -> Gateway {
    Gateway::new(Arc::new(MockGenerator::new(world_script(n))), concurrency)
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> PathBuf {
    let body: String = rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(path, body).unwrap();
    path.to_path_buf()
}

pub struct HttpReply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl HttpReply {
    pub fn ok(body: impl Into<String>) -> Self {
        Self { status: 200, body: body.into(), delay: Duration::ZERO }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        Self { status, body: body.into(), delay: Duration::ZERO }
    }
}

pub struct TestServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl TestServer {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Serves every request with `handler(call_index, request_body)`.
pub fn serve<F>(handler: F) -> TestServer
where
    F: Fn(usize, &str) -> HttpReply + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            let _ = reader.read_exact(&mut body);
            let call = counter.fetch_add(1, Ordering::SeqCst);
            let reply = handler(call, &String::from_utf8_lossy(&body));
            std::thread::sleep(reply.delay);
            let head = format!(
                "HTTP/1.1 {} Test\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                reply.status,
                reply.body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.body.as_bytes());
            let _ = stream.flush();
        }
    });
    TestServer { url, hits }
}
