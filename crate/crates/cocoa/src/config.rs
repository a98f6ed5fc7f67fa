//! Run configuration: a TOML file, overridable from the command line, and
//! frozen next to every output it produced.

use std::path::{Path, PathBuf};

use cocoa_core::bm25::{DEFAULT_B, DEFAULT_K1};
use cocoa_core::metrics::MetricMode;
use cocoa_core::VariantId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS, DEFAULT_UNIFIED_MAX_TOKENS};
use crate::pipeline::{PipelineConfig, DEFAULT_K};

pub const FROZEN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    LocalBm25,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    /// Corpus store directory (local_bm25).
    pub store: Option<PathBuf>,
    /// Prebuilt index file; defaults to the one inside the store.
    pub index: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            kind: RetrieverKind::LocalBm25,
            store: None,
            index: None,
            endpoint: None,
            timeout_secs: 30,
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub mock_script: Option<PathBuf>,
    pub mock_strict: bool,
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub unified_max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            mock_script: None,
            mock_strict: false,
            endpoint: None,
            model: "default".into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            unified_max_tokens: DEFAULT_UNIFIED_MAX_TOKENS,
            stop_sequences: Vec::new(),
            max_retries: 3,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_name: Option<String>,
    pub out_dir: PathBuf,
    pub variant: VariantId,
    pub k: usize,
    pub concurrency_limit: usize,
    pub stage_branches_concurrent: bool,
    pub canonical: bool,
    pub task_instruction: Option<String>,
    pub metric: MetricMode,
    pub retriever: RetrieverConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            dataset_name: None,
            out_dir: PathBuf::from("out"),
            variant: VariantId::CocoaZero,
            k: DEFAULT_K,
            concurrency_limit: DEFAULT_CONCURRENCY,
            stage_branches_concurrent: true,
            canonical: false,
            task_instruction: None,
            metric: MetricMode::Qa,
            retriever: RetrieverConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(path)).unwrap_or_else(|_| path.to_path_buf())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let read = |message: String| ConfigError::Read { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| read(e.to_string()))?;
        // Relative paths inside a config file are relative to that file.
        let base = absolute(path).parent().map(Path::to_path_buf).unwrap_or_default();
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut().filter(|p| p.is_relative()) {
                *inner = base.join(&*inner);
            }
        };
        rebase(&mut cfg.dataset);
        rebase(&mut cfg.retriever.store);
        rebase(&mut cfg.retriever.index);
        rebase(&mut cfg.generator.mock_script);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self, needs_dataset: bool) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.concurrency_limit == 0 {
            return bad("concurrency_limit must be >= 1");
        }
        if needs_dataset && self.dataset.is_none() {
            return bad("no dataset given");
        }
        let g = &self.generator;
        match (&g.mock_script, &g.endpoint) {
            (Some(_), Some(_)) => return bad("configure exactly one generator backend (mock_script or endpoint), not both"),
            (None, None) => return bad("no generator backend configured (set generator.mock_script or generator.endpoint)"),
            _ => {}
        }
        if !(g.temperature >= 0.0) {
            return bad("generator.temperature must be >= 0");
        }
        if g.max_tokens == 0 || g.unified_max_tokens == 0 {
            return bad("generator max_tokens must be > 0");
        }
        if self.variant.uses_retrieval() {
            match self.retriever.kind {
                RetrieverKind::LocalBm25 if self.retriever.store.is_none() => {
                    return bad("retriever.kind = local_bm25 requires retriever.store")
                }
                RetrieverKind::Remote if self.retriever.endpoint.is_none() => {
                    return bad("retriever.kind = remote requires retriever.endpoint")
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Resolves relative paths against the working directory so the frozen
    /// copy can be re-run from anywhere.
    pub fn absolutized(&self) -> Self {
        let mut c = self.clone();
        for p in [&mut c.dataset, &mut c.retriever.store, &mut c.retriever.index, &mut c.generator.mock_script] {
            if let Some(inner) = p.as_mut() {
                *inner = absolute(inner);
            }
        }
        c.out_dir = absolute(&c.out_dir);
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn freeze(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(FROZEN_CONFIG_FILE);
        std::fs::write(&path, self.absolutized().to_toml())?;
        Ok(path)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            variant: self.variant,
            concurrency_limit: self.concurrency_limit,
            stage_branches_concurrent: self.stage_branches_concurrent,
            task_instruction: self.task_instruction.clone(),
            model_name: self.generator.model.clone(),
            temperature: self.generator.temperature,
            max_tokens: self.generator.max_tokens,
            unified_max_tokens: self.generator.unified_max_tokens,
            stop_sequences: self.generator.stop_sequences.clone(),
            canonical: self.canonical,
        }
    }

    pub fn dataset_label(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            self.dataset
                .as_deref()
                .and_then(Path::file_stem)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }
}
