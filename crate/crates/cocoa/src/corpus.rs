//! Passage corpus ingestion and storage.
//!
//! A store directory holds `passages.jsonl` (canonical re-encoding of the
//! input, in input order) and `corpus.json` (the [`CorpusHandle`]). The
//! checksum is the SHA-256 of `passages.jsonl`, so it is stable across
//! re-opens and identical for identical input.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cocoa_core::Passage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl::{read_jsonl, JsonlError};

const PASSAGES_FILE: &str = "passages.jsonl";
const HANDLE_FILE: &str = "corpus.json";
const TSV_HEADER: &str = "id\ttext\ttitle";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),
    #[error("corpus file {0} contains no passages")]
    Empty(PathBuf),
    #[error("passage `{0}` not found")]
    NotFound(String),
    #[error("corpus store {path} is inconsistent: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unknown corpus format `{0}` (expected jsonl or tsv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    /// `id<TAB>text<TAB>title`, optional header line.
    Tsv,
}

impl CorpusFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(Self::Jsonl),
            "tsv" => Some(Self::Tsv),
            _ => None,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHandle {
    pub passage_count: usize,
    pub storage_path: PathBuf,
    pub checksum: String,
}

#[derive(Deserialize)]
struct JsonRow {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
}

fn parse_rows(input: &Path, format: CorpusFormat) -> Result<Vec<Passage>, CorpusError> {
    let io = |source| CorpusError::Io { path: input.to_path_buf(), source };
    let reader = BufReader::new(fs::File::open(input).map_err(io)?);
    let mut passages: Vec<Passage> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::MalformedRow { line: line_no, message };
        let (id, title, text) = match format {
            CorpusFormat::Jsonl => {
                let row: JsonRow = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                (row.id, row.title, row.text)
            }
            CorpusFormat::Tsv => {
                if line_no == 1 && line == TSV_HEADER {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    return Err(malformed(format!("expected 3 tab-separated columns, found {}", cols.len())));
                }
                (cols[0].to_string(), cols[2].to_string(), cols[1].to_string())
            }
        };
        let passage = Passage::new(id, title, text).map_err(|e| malformed(e.to_string()))?;
        if seen.insert(passage.id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateId(passage.id));
        }
        passages.push(passage);
    }
    if passages.is_empty() {
        return Err(CorpusError::Empty(input.to_path_buf()));
    }
    Ok(passages)
}

fn encode(passages: &[Passage]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in passages {
        serde_json::to_writer(&mut out, p).expect("passage serializes");
        out.push(b'\n');
    }
    out
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses `input`, rejects malformed rows and duplicate ids, and persists the
/// corpus under `storage_dir`.
pub fn ingest_corpus(input: &Path, format: CorpusFormat, storage_dir: &Path) -> Result<CorpusHandle, CorpusError> {
    let passages = parse_rows(input, format)?;
    let io = |source| CorpusError::Io { path: storage_dir.to_path_buf(), source };
    fs::create_dir_all(storage_dir).map_err(io)?;
    let bytes = encode(&passages);
    fs::write(storage_dir.join(PASSAGES_FILE), &bytes).map_err(io)?;
    let handle = CorpusHandle {
        passage_count: passages.len(),
        storage_path: storage_dir.to_path_buf(),
        checksum: checksum(&bytes),
    };
    let meta = serde_json::to_vec_pretty(&handle).expect("handle serializes");
    fs::write(storage_dir.join(HANDLE_FILE), meta).map_err(io)?;
    Ok(handle)
}

/// An opened, read-only corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    handle: CorpusHandle,
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn open(storage_dir: &Path) -> Result<Self, CorpusError> {
        let corrupt = |reason: String| CorpusError::Corrupt { path: storage_dir.to_path_buf(), reason };
        let handle_path = storage_dir.join(HANDLE_FILE);
        let raw = fs::read(&handle_path).map_err(|source| CorpusError::Io { path: handle_path, source })?;
        let mut handle: CorpusHandle = serde_json::from_slice(&raw).map_err(|e| corrupt(e.to_string()))?;
        handle.storage_path = storage_dir.to_path_buf();

        let passages_path = storage_dir.join(PASSAGES_FILE);
        let bytes = fs::read(&passages_path).map_err(|source| CorpusError::Io { path: passages_path.clone(), source })?;
        if checksum(&bytes) != handle.checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        let passages: Vec<Passage> = read_jsonl(&passages_path)?;
        if passages.len() != handle.passage_count {
            return Err(corrupt(format!(
                "handle records {} passages, store holds {}",
                handle.passage_count,
                passages.len()
            )));
        }
        let by_id = passages.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Ok(Self { handle, passages, by_id })
    }

    pub fn handle(&self) -> &CorpusHandle {
        &self.handle
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get_passage(&self, id: &str) -> Result<&Passage, CorpusError> {
        self.by_id
            .get(id)
            .map(|&i| &self.passages[i])
            .ok_or_else(|| CorpusError::NotFound(id.to_string()))
    }
}

pub fn get_passage(handle: &CorpusHandle, id: &str) -> Result<Passage, CorpusError> {
    Corpus::open(&handle.storage_path)?.get_passage(id).cloned()
}
