//! Teacher-driven dataset and response-set augmentation, plus the
//! retriever-based augmentation used as an ablation.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biencoder::{dot, EncoderParams};
use crate::corpus::{
    canonical, corpus_stats, CorpusStats, DialogueDataset, DialoguePair, ResponseSet, Source, Vocab,
};
use crate::error::{G2rError, Result};
use crate::rng::{derive_seed, RNG_ALGORITHM};
use crate::teacher::{sample_response, MiMean, SamplingConfig, TeacherLM};
use crate::train::ScoreKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// `(min_len, count)` sub-configurations; counts sum to `m`.
    pub samples_per_constraint: Vec<(usize, usize)>,
    pub top_k: usize,
    pub max_len: usize,
    pub block_context_trigrams: bool,
    pub block_response_trigrams: bool,
    pub seed: u64,
    pub cache_scores: bool,
    pub score_kind: ScoreKind,
    pub mi_mean: MiMean,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            samples_per_constraint: vec![(10, 5), (20, 5)],
            top_k: 20,
            max_len: 40,
            block_context_trigrams: true,
            block_response_trigrams: true,
            seed: 0,
            cache_scores: true,
            score_kind: ScoreKind::Ll,
            mi_mean: MiMean::Log,
        }
    }
}

impl AugmentConfig {
    /// Total samples per context.
    pub fn m(&self) -> usize {
        self.samples_per_constraint.iter().map(|&(_, c)| c).sum()
    }

    /// Parses `"10:5,20:5"` into `(min_len, count)` pairs.
    pub fn parse_constraints(spec: &str) -> Result<Vec<(usize, usize)>> {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|part| {
                let (a, b) = part
                    .split_once(':')
                    .ok_or_else(|| G2rError::invalid(format!("constraint {part:?} is not min_len:count")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| G2rError::invalid(format!("constraint {part:?}: {e}")))
                };
                Ok((parse(a)?, parse(b)?))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(G2rError::invalid("augmentation needs m >= 1 samples per context"));
        }
        let mut seen = HashSet::new();
        for &(min_len, _) in &self.samples_per_constraint {
            if !seen.insert(min_len) {
                return Err(G2rError::invalid(format!("duplicate min_len {min_len}")));
            }
        }
        Ok(())
    }

    fn sampling(&self, min_len: usize, seed: u64) -> SamplingConfig {
        SamplingConfig {
            top_k: self.top_k,
            min_len,
            max_len: self.max_len,
            block_context_trigrams: self.block_context_trigrams,
            block_response_trigrams: self.block_response_trigrams,
            seed,
        }
    }
}

/// Per-statistic `after / before` ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRatios {
    pub responses: f64,
    pub avg_length: f64,
    pub unique_tokens: f64,
    pub unique_bigrams: f64,
    pub unique_trigrams: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub n_generated: usize,
    pub n_kept_after_dedup: usize,
    pub set_ratio: f64,
    pub stats_before: CorpusStats,
    pub stats_after: CorpusStats,
    pub ratios: StatRatios,
    pub rng: String,
    pub seed: u64,
}

fn ratio(after: f64, before: f64) -> f64 {
    if before == 0.0 {
        if after == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        after / before
    }
}

/// Compares two response sets statistic by statistic.
pub fn compare_stats(before: &ResponseSet, after: &ResponseSet) -> Result<AugmentReport> {
    if before.is_empty() {
        return Err(G2rError::Empty("baseline response set is empty".into()));
    }
    let b = corpus_stats(before)?;
    let a = corpus_stats(after)?;
    let ratios = StatRatios {
        responses: ratio(a.n_responses as f64, b.n_responses as f64),
        avg_length: ratio(a.avg_length, b.avg_length),
        unique_tokens: ratio(a.unique_tokens as f64, b.unique_tokens as f64),
        unique_bigrams: ratio(a.unique_bigrams as f64, b.unique_bigrams as f64),
        unique_trigrams: ratio(a.unique_trigrams as f64, b.unique_trigrams as f64),
    };
    let added = after.len().saturating_sub(before.len());
    Ok(AugmentReport {
        n_generated: added,
        n_kept_after_dedup: added,
        set_ratio: ratios.responses,
        stats_before: b,
        stats_after: a,
        ratios,
        rng: RNG_ALGORITHM.to_string(),
        seed: 0,
    })
}

fn teacher_score(teacher: &TeacherLM, pair: &DialoguePair, cfg: &AugmentConfig) -> Result<f64> {
    match cfg.score_kind {
        ScoreKind::Ll => teacher.ll_score(&pair.context, &pair.response),
        ScoreKind::Mi => teacher.mi_score(&pair.context, &pair.response, cfg.mi_mean),
    }
}

fn check_vocab(teacher: &TeacherLM, dataset: &DialogueDataset) -> Result<()> {
    let vocab = teacher.vocab();
    for (i, p) in dataset.pairs.iter().enumerate() {
        let unknown = p
            .context
            .all_turns()
            .iter()
            .flatten()
            .chain(&p.response)
            .find(|t| vocab.get(t).is_none());
        if let Some(t) = unknown {
            return Err(G2rError::VocabMismatch(format!(
                "pair {i}: token {t:?} is unknown to the teacher"
            )));
        }
    }
    Ok(())
}

/// Samples `m` teacher responses per pair and builds `D^G` and `R^G`.
///
/// Original pairs come first and unchanged (apart from the cached score),
/// followed by generated pairs in pair order. A generated response equal to
/// the gold or to an earlier sample for the same context is dropped. Pair
/// `i` samples from sub-seed `derive_seed(seed, i)`, so contexts are
/// processed in parallel without affecting the output.
pub fn augment_dataset(
    teacher: &TeacherLM,
    dataset: &DialogueDataset,
    base_set: &ResponseSet,
    cfg: &AugmentConfig,
) -> Result<(DialogueDataset, ResponseSet, AugmentReport)> {
    cfg.validate()?;
    check_vocab(teacher, dataset)?;
    for &(min_len, _) in &cfg.samples_per_constraint {
        cfg.sampling(min_len, 0).validate(teacher.vocab().len())?;
    }

    let generated: Vec<Vec<Vec<String>>> = dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let sub = derive_seed(cfg.seed, i as u64);
            let mut out = Vec::with_capacity(cfg.m());
            let mut j = 0u64;
            for &(min_len, count) in &cfg.samples_per_constraint {
                for _ in 0..count {
                    let s = cfg.sampling(min_len, derive_seed(sub, j));
                    out.push(sample_response(teacher, &pair.context, &s)?);
                    j += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut pairs: Vec<DialoguePair> = dataset.pairs.clone();
    let mut set = base_set.clone();
    let mut n_generated = 0;
    let mut extra = Vec::new();
    for (pair, samples) in dataset.pairs.iter().zip(generated) {
        let mut seen: HashSet<String> = HashSet::from([canonical(&pair.response)]);
        for r in samples {
            n_generated += 1;
            if !seen.insert(canonical(&r)) {
                continue;
            }
            set.insert(&r);
            extra.push(DialoguePair {
                context: pair.context.clone(),
                response: r,
                source: Source::TeacherGenerated,
                teacher_score: None,
            });
        }
    }
    let n_kept = extra.len();
    pairs.extend(extra);
    if cfg.cache_scores {
        let scores: Vec<f64> = pairs
            .par_iter()
            .map(|p| teacher_score(teacher, p, cfg))
            .collect::<Result<_>>()?;
        for (p, s) in pairs.iter_mut().zip(scores) {
            p.teacher_score = Some(s);
        }
    }
    let mut report = compare_stats(base_set, &set)?;
    report.n_generated = n_generated;
    report.n_kept_after_dedup = n_kept;
    report.seed = cfg.seed;
    Ok((DialogueDataset::new(pairs, dataset.split)?, set, report))
}

/// Appends, for every pair, the retriever's top-`m` responses from
/// `base_set` other than the gold. The response set itself is unchanged.
pub fn augment_with_retriever(
    params: &EncoderParams,
    vocab: &Vocab,
    dataset: &DialogueDataset,
    base_set: &ResponseSet,
    m: usize,
) -> Result<DialogueDataset> {
    if m >= base_set.len() {
        return Err(G2rError::invalid(format!(
            "m = {m} must be below the response set size {}",
            base_set.len()
        )));
    }
    let resp = base_set
        .responses()
        .iter()
        .map(|r| params.encode_response_ids(&vocab.ids(r)))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = dataset.pairs.clone();
    for p in &dataset.pairs {
        let c = params.encode_context_ids(&vocab.context_ids(&p.context))?;
        let gold = base_set.id_of(&p.response);
        let mut scored: Vec<(f64, usize)> = resp
            .iter()
            .enumerate()
            .filter(|&(id, _)| Some(id) != gold)
            .map(|(id, r)| (dot(&c, r), id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, id) in scored.iter().take(m) {
            pairs.push(DialoguePair {
                context: p.context.clone(),
                response: base_set.get(id).unwrap().to_vec(),
                source: Source::RetrieverAugmented,
                teacher_score: None,
            });
        }
    }
    DialogueDataset::new(pairs, dataset.split)
}
