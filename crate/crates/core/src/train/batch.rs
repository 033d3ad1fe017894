use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;

use super::loss::{ce_with_grad, combined_loss, kd_with_grad, LossBreakdown};
use super::{Mode, TrainConfig};
use crate::biencoder::{EncoderParams, GradientSet, ScoreMatrix, TokenBatch};
use crate::corpus::{DialogueDataset, ResponseSet, Vocab};
use crate::error::{G2rError, Result};
use crate::rng::{sha256_hex, G2rRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    /// Id in the training response set.
    pub response: usize,
    pub teacher_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextGroup {
    pub context: Vec<u32>,
    pub positives: Vec<Positive>,
}

/// Training pairs grouped by context, with every response pre-tokenized.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub groups: Vec<ContextGroup>,
    pub responses: Vec<Vec<u32>>,
}

impl TrainingData {
    /// Groups pairs by windowed context; repeated (context, response) pairs collapse.
    pub fn new(dataset: &DialogueDataset, set: &ResponseSet, vocab: &Vocab) -> Result<Self> {
        let mut by_key: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<ContextGroup> = Vec::new();
        for (i, p) in dataset.pairs.iter().enumerate() {
            let rid = set.id_of(&p.response).ok_or_else(|| {
                G2rError::invalid(format!("pair {i}: response missing from the response set"))
            })?;
            let g = *by_key.entry(p.context.key()).or_insert_with(|| {
                groups.push(ContextGroup {
                    context: vocab.context_ids(&p.context),
                    positives: Vec::new(),
                });
                groups.len() - 1
            });
            let group = &mut groups[g];
            if group.positives.iter().all(|q| q.response != rid) {
                group.positives.push(Positive {
                    response: rid,
                    teacher_score: p.teacher_score,
                });
            }
        }
        let responses = set.responses().iter().map(|r| vocab.ids(r)).collect();
        Ok(TrainingData { groups, responses })
    }

    pub fn has_all_scores(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.positives.iter().all(|p| p.teacher_score.is_some()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into [`TrainingData::groups`], distinct.
    pub contexts: Vec<usize>,
    /// Per context, `responses_per_context` positives (padded with repeats).
    pub positives: Vec<Vec<Positive>>,
    /// Shared negatives: response ids disjoint from every batch positive.
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        for (c, ps) in self.contexts.iter().zip(&self.positives) {
            s.push_str(&format!("{c}:"));
            for p in ps {
                s.push_str(&format!("{},", p.response));
            }
            s.push(';');
        }
        for n in &self.negatives {
            s.push_str(&format!("{n},"));
        }
        sha256_hex(s.as_bytes())[..16].to_string()
    }

    /// Distinct positives of context `i`, in batch order.
    pub fn distinct_positives(&self, i: usize) -> Vec<Positive> {
        let mut seen = HashSet::new();
        self.positives[i]
            .iter()
            .filter(|p| seen.insert(p.response))
            .copied()
            .collect()
    }
}

/// Samples distinct contexts, their positives, and shared negatives drawn
/// uniformly without replacement from the response set, rejecting any draw
/// that is a batch positive.
pub fn compose_batch(data: &TrainingData, cfg: &TrainConfig, rng: &mut G2rRng) -> Result<Batch> {
    if data.groups.len() < cfg.contexts_per_batch {
        return Err(G2rError::invalid(format!(
            "{} contexts available, batch needs {}",
            data.groups.len(),
            cfg.contexts_per_batch
        )));
    }
    let contexts = index::sample(rng, data.groups.len(), cfg.contexts_per_batch).into_vec();
    let mut positives = Vec::with_capacity(contexts.len());
    let mut taken = HashSet::new();
    for &g in &contexts {
        let pool = &data.groups[g].positives;
        let picked: Vec<Positive> = if pool.len() >= cfg.responses_per_context {
            index::sample(rng, pool.len(), cfg.responses_per_context)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            let mut v = pool.clone();
            while v.len() < cfg.responses_per_context {
                v.push(pool[rng.random_range(0..pool.len())]);
            }
            v
        };
        taken.extend(picked.iter().map(|p| p.response));
        positives.push(picked);
    }
    let n = data.responses.len();
    if n < taken.len() + cfg.shared_negatives {
        return Err(G2rError::invalid(format!(
            "response set of {n} cannot supply {} negatives beside {} positives",
            cfg.shared_negatives,
            taken.len()
        )));
    }
    let mut negatives = Vec::with_capacity(cfg.shared_negatives);
    while negatives.len() < cfg.shared_negatives {
        let r = rng.random_range(0..n);
        if taken.insert(r) {
            negatives.push(r);
        }
    }
    Ok(Batch {
        contexts,
        positives,
        negatives,
    })
}

/// Full objective `α·L_CE + (1 − α)·L_KD` for one batch, with its gradient.
///
/// CE averages over every positive in the batch (padding repeats included),
/// each scored against the shared negatives. KD averages over contexts.
/// In [`Mode::CeOnly`] the blend weight is 1; KD is still reported when all
/// teacher scores are present, and is 0 otherwise.
pub fn objective(
    params: &EncoderParams,
    data: &TrainingData,
    batch: &Batch,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<GradientSet>)> {
    let mut col_of: HashMap<usize, usize> = HashMap::new();
    let mut cols: Vec<usize> = Vec::new();
    for r in batch
        .positives
        .iter()
        .flatten()
        .map(|p| p.response)
        .chain(batch.negatives.iter().copied())
    {
        col_of.entry(r).or_insert_with(|| {
            cols.push(r);
            cols.len() - 1
        });
    }
    let tokens = TokenBatch {
        contexts: batch.contexts.iter().map(|&g| data.groups[g].context.clone()).collect(),
        responses: cols.iter().map(|&r| data.responses[r].clone()).collect(),
    };
    let scores = params.score_batch(&tokens)?;
    let neg_cols: Vec<usize> = batch.negatives.iter().map(|r| col_of[r]).collect();

    let kd_wanted = cfg.mode == Mode::CePlusKd;
    let kd_available = batch
        .positives
        .iter()
        .flatten()
        .all(|p| p.teacher_score.is_some());
    if kd_wanted && !kd_available {
        return Err(G2rError::invalid("distillation requires teacher scores on every positive"));
    }
    let alpha = if kd_wanted { cfg.alpha } else { 1.0 };

    let n_pos: usize = batch.positives.iter().map(Vec::len).sum();
    let n_ctx = batch.contexts.len();
    let mut ce_grad = ScoreMatrix::zeros(scores.rows, scores.cols);
    let mut kd_grad = ScoreMatrix::zeros(scores.rows, scores.cols);
    let mut ce_total = 0.0;
    let mut kd_total = 0.0;
    let mut logits = Vec::with_capacity(neg_cols.len() + 16);
    for i in 0..n_ctx {
        let row = scores.row(i);
        for p in &batch.positives[i] {
            let c = col_of[&p.response];
            logits.clear();
            logits.push(row[c]);
            logits.extend(neg_cols.iter().map(|&j| row[j]));
            let (l, g) = ce_with_grad(&logits, 0);
            ce_total += l;
            *ce_grad.get_mut(i, c) += g[0] / n_pos as f64;
            for (k, &j) in neg_cols.iter().enumerate() {
                *ce_grad.get_mut(i, j) += g[k + 1] / n_pos as f64;
            }
        }
        if kd_available {
            let pos = batch.distinct_positives(i);
            let pos_cols: Vec<usize> = pos.iter().map(|p| col_of[&p.response]).collect();
            let teacher: Vec<f64> = pos.iter().map(|p| p.teacher_score.unwrap()).collect();
            logits.clear();
            logits.extend(pos_cols.iter().chain(&neg_cols).map(|&j| row[j]));
            let (l, g) = kd_with_grad(&logits, &teacher, cfg.temperature)?;
            kd_total += l;
            for (k, &j) in pos_cols.iter().chain(&neg_cols).enumerate() {
                *kd_grad.get_mut(i, j) += g[k] / n_ctx as f64;
            }
        }
    }
    let ce = ce_total / n_pos as f64;
    let kd = if kd_available { kd_total / n_ctx as f64 } else { 0.0 };
    let loss = combined_loss(ce, kd, alpha)?;
    if !with_grad {
        return Ok((loss, None));
    }
    let upstream = if kd_wanted {
        let mut u = ce_grad;
        for (a, b) in u.data.iter_mut().zip(&kd_grad.data) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
        u
    } else {
        ce_grad
    };
    Ok((loss, Some(params.backward(&tokens, &upstream)?)))
}
