//! Non-strict exact match, token F1 and run-level aggregation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::model::{PipelineRecord, VariantId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("gold answer list is empty")]
    NoGolds,
    #[error("query `{0}` has no gold answers")]
    MissingGolds(String),
    #[error("no records to evaluate")]
    NoRecords,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip ASCII punctuation, drop articles, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(ToString::to_string)
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        // an empty gold only matches an empty prediction
        return haystack.is_empty();
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// 1 when some gold's normalized tokens occur as a contiguous run inside the
/// normalized prediction.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<u8, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::NoGolds);
    }
    let pred = normalize_answer(prediction);
    let hit = golds
        .iter()
        .any(|g| contains_run(&pred, &normalize_answer(g.as_ref())));
    Ok(u8::from(hit))
}

fn f1_pair(pred: &[String], gold: &[String]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-multiset F1 against any gold.
pub fn f1_score<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::NoGolds);
    }
    let pred = normalize_answer(prediction);
    Ok(golds
        .iter()
        .map(|g| f1_pair(&pred, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max))
}

/// Label accuracy for classification-style tasks: normalized prediction
/// equals some normalized gold.
pub fn label_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<u8, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::NoGolds);
    }
    let pred = normalize_answer(prediction);
    Ok(u8::from(golds.iter().any(|g| normalize_answer(g.as_ref()) == pred)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Non-strict EM plus token F1.
    #[default]
    Qa,
    /// Exact label equality in the EM column; F1 unchanged.
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: String,
    pub prediction: String,
    pub em: u8,
    #[serde(serialize_with = "round4")]
    pub f1: f64,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub failed: bool,
}

/// Aggregated scores. Means are kept in full precision and rounded half-up
/// to two decimals only when serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub variant: Option<VariantId>,
    pub n: usize,
    #[serde(serialize_with = "round2")]
    pub em_mean: f64,
    #[serde(serialize_with = "round2")]
    pub f1_mean: f64,
    #[serde(serialize_with = "round2")]
    pub avg: f64,
    pub rows: Vec<EvalRow>,
}

/// Half-up rounding of a non-negative percentage to `places` decimals.
pub fn round_half_up(x: f64, places: i32) -> f64 {
    let scale = libm::pow(10.0, places as f64);
    libm::floor(x * scale + 0.5) / scale
}

fn round2<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_half_up(*x, 2))
}

fn round4<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_half_up(*x, 4))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub dataset: String,
    pub mode: MetricMode,
    /// Drop failed records instead of scoring them 0/0.
    pub exclude_failed: bool,
}

/// Scores every record's final answer against its query's golds.
pub fn evaluate_run(records: &[PipelineRecord], opts: &EvalOptions) -> Result<EvalReport, MetricError> {
    if records.is_empty() {
        return Err(MetricError::NoRecords);
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let golds = &r.query.gold_answers;
        if golds.is_empty() {
            return Err(MetricError::MissingGolds(r.query.id.clone()));
        }
        let failed = r.is_failed();
        if failed && opts.exclude_failed {
            continue;
        }
        let prediction = r.decision.answer.clone();
        let (em, f1) = if failed {
            (0, 0.0)
        } else {
            let em = match opts.mode {
                MetricMode::Qa => exact_match(&prediction, golds)?,
                MetricMode::Label => label_match(&prediction, golds)?,
            };
            (em, f1_score(&prediction, golds)?)
        };
        rows.push(EvalRow {
            query_id: r.query.id.clone(),
            prediction,
            em,
            f1,
            failed,
        });
    }
    if rows.is_empty() {
        return Err(MetricError::NoRecords);
    }
    let variants: Vec<VariantId> = records.iter().map(|r| r.variant).collect();
    let variant = variants.iter().all(|v| *v == variants[0]).then(|| variants[0]);
    Ok(summarize(opts.dataset.clone(), variant, rows))
}

pub fn summarize(dataset: String, variant: Option<VariantId>, rows: Vec<EvalRow>) -> EvalReport {
    let n = rows.len();
    let em_mean = 100.0 * rows.iter().map(|r| f64::from(r.em)).sum::<f64>() / n as f64;
    let f1_mean = 100.0 * rows.iter().map(|r| r.f1).sum::<f64>() / n as f64;
    EvalReport {
        dataset,
        variant,
        n,
        em_mean,
        f1_mean,
        avg: (em_mean + f1_mean) / 2.0,
        rows,
    }
}

impl EvalReport {
    /// Aligned plain-text summary table.
    pub fn to_table(&self) -> String {
        let variant = self.variant.map_or("mixed", VariantId::as_str);
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<14} {:>6} {:>8} {:>8} {:>8}", "dataset", "variant", "n", "EM", "F1", "Avg");
        let _ = writeln!(
            out,
            "{:<16} {:<14} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            self.dataset,
            variant,
            self.n,
            round_half_up(self.em_mean, 2),
            round_half_up(self.f1_mean, 2),
            round_half_up(self.avg, 2)
        );
        out
    }

    /// Per-row CSV with a header line.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("query_id,em,f1,failed,prediction\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{},{}",
                csv_field(&r.query_id),
                r.em,
                r.f1,
                r.failed,
                csv_field(&r.prediction)
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
