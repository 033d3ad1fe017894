//! Lexical response-quality metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{G2rError, Result};

/// Unique and total n-gram counts over a list of responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramCounts {
    pub unique: usize,
    pub total: usize,
}

pub fn ngram_counts(responses: &[Vec<String>], n: usize) -> Result<NgramCounts> {
    if n == 0 {
        return Err(G2rError::invalid("n must be at least 1"));
    }
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut total = 0;
    for r in responses {
        for g in r.windows(n) {
            total += 1;
            seen.insert(g);
        }
    }
    Ok(NgramCounts {
        unique: seen.len(),
        total,
    })
}

/// Distinct n-grams over n-gram instances, pooled across all responses.
pub fn dist_n(responses: &[Vec<String>], n: usize) -> Result<f64> {
    let c = ngram_counts(responses, n)?;
    if c.total == 0 {
        return Err(G2rError::Empty(format!("no {n}-grams in the responses")));
    }
    Ok(c.unique as f64 / c.total as f64)
}

pub fn avg_length(responses: &[Vec<String>]) -> Result<f64> {
    if responses.is_empty() {
        return Err(G2rError::Empty("no responses".into()));
    }
    Ok(responses.iter().map(Vec::len).sum::<usize>() as f64 / responses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dist2: f64,
    pub dist3: f64,
    pub avg_length: f64,
    pub n_responses: usize,
}

pub fn metrics_report(responses: &[Vec<String>]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        dist2: dist_n(responses, 2)?,
        dist3: dist_n(responses, 3)?,
        avg_length: avg_length(responses)?,
        n_responses: responses.len(),
    })
}
