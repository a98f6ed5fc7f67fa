//! Training dataset export.

use std::collections::BTreeSet;
use std::path::Path;

use cocoa_core::synthesis::{DpoSample, SftSample};
use thiserror::Error;

use crate::jsonl::{write_jsonl, JsonlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Sft,
    Dpo,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingSample {
    Sft(SftSample),
    Dpo(DpoSample),
}

impl TrainingSample {
    pub fn id(&self) -> &str {
        match self {
            TrainingSample::Sft(s) => &s.id,
            TrainingSample::Dpo(s) => &s.id,
        }
    }

    pub fn format(&self) -> DatasetFormat {
        match self {
            TrainingSample::Sft(_) => DatasetFormat::Sft,
            TrainingSample::Dpo(_) => DatasetFormat::Dpo,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("nothing to export")]
    Empty,
    #[error("sample `{id}` is {found:?}, dataset is {expected:?}")]
    MixedFormats { id: String, expected: DatasetFormat, found: DatasetFormat },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Writes samples as JSONL sorted by id. Returns the number written.
pub fn export_dataset(samples: &[TrainingSample], path: &Path, format: DatasetFormat) -> Result<usize, ExportError> {
    if samples.is_empty() {
        return Err(ExportError::Empty);
    }
    let mut seen = BTreeSet::new();
    for s in samples {
        if s.format() != format {
            return Err(ExportError::MixedFormats { id: s.id().to_string(), expected: format, found: s.format() });
        }
        if !seen.insert(s.id()) {
            return Err(ExportError::DuplicateId(s.id().to_string()));
        }
    }
    let mut sorted: Vec<&TrainingSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let n = match format {
        DatasetFormat::Sft => {
            let rows: Vec<&SftSample> = sorted.iter().filter_map(|s| match s {
                TrainingSample::Sft(x) => Some(x),
                TrainingSample::Dpo(_) => None,
            }).collect();
            write_jsonl(path, rows)?
        }
        DatasetFormat::Dpo => {
            let rows: Vec<&DpoSample> = sorted.iter().filter_map(|s| match s {
                TrainingSample::Dpo(x) => Some(x),
                TrainingSample::Sft(_) => None,
            }).collect();
            write_jsonl(path, rows)?
        }
    };
    Ok(n)
}
