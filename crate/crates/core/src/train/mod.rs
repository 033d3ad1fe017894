//! Retriever training: batch composition, CE + distillation objective,
//! Adamax updates and Hits@N/K validation.

mod batch;
mod eval;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::biencoder::EncoderParams;
use crate::corpus::{DialogueDataset, ResponseSet, Vocab};
use crate::error::{G2rError, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub use batch::{compose_batch, objective, Batch, ContextGroup, Positive, TrainingData};
pub use eval::{hits_at, hits_from_ranks, EvalCandidates, EvalCase};
pub use loss::{
    ce_loss, combined_loss, kd_loss, log_sum_exp, softmax, student_distribution,
    teacher_distribution, LossBreakdown,
};
pub use optim::{clip_grad_norm, Adamax, ReduceOnPlateau};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    CeOnly,
    CePlusKd,
}

/// Which teacher score is cached as the distillation target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Ll,
    Mi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub contexts_per_batch: usize,
    pub responses_per_context: usize,
    pub shared_negatives: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub epochs: usize,
    /// 0 means one pass over the contexts per epoch.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub mode: Mode,
    pub score_kind: ScoreKind,
    pub eval_k: usize,
    pub eval_seed: u64,
    /// When false, `wall_ms` is written as 0 so histories are reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.9,
            temperature: 1.0,
            contexts_per_batch: 48,
            responses_per_context: 10,
            shared_negatives: 512,
            learning_rate: 0.1,
            grad_clip: 0.1,
            lr_decay: 0.5,
            lr_patience: 1,
            epochs: 20,
            steps_per_epoch: 0,
            seed: 0,
            mode: Mode::CePlusKd,
            score_kind: ScoreKind::Ll,
            eval_k: 20,
            eval_seed: 0,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(G2rError::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(G2rError::invalid("temperature must be positive"));
        }
        if self.contexts_per_batch == 0
            || self.responses_per_context == 0
            || self.shared_negatives == 0
            || self.epochs == 0
            || self.eval_k == 0
        {
            return Err(G2rError::invalid("batch sizes, epochs and eval_k must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(G2rError::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    pub hits1: Option<f64>,
    pub hits5: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,ce,kd,total,hits1,hits5,lr,wall_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.ce,
            r.kd,
            r.total,
            opt(r.hits1),
            opt(r.hits5),
            r.lr,
            r.wall_ms
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation Hits@1/K (earliest on ties).
    pub params: EncoderParams,
    pub history: Vec<HistoryRow>,
    pub best_hits1: f64,
    pub best_epoch: usize,
}

/// Trains `params` on `(dataset, set)`, validating on `valid` after each epoch.
pub fn train(
    params: EncoderParams,
    vocab: &Vocab,
    dataset: &DialogueDataset,
    set: &ResponseSet,
    valid: &DialogueDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.vocab_size() != vocab.len() {
        return Err(G2rError::VocabMismatch(format!(
            "encoder has {} rows, vocabulary {} tokens",
            params.vocab_size(),
            vocab.len()
        )));
    }
    let data = TrainingData::new(dataset, set, vocab)?;
    if cfg.mode == Mode::CePlusKd && !data.has_all_scores() {
        return Err(G2rError::invalid("distillation requires teacher scores on every positive"));
    }
    let valid_cands = EvalCandidates::new(valid, cfg.eval_k, cfg.eval_seed)?;
    let steps_per_epoch = if cfg.steps_per_epoch == 0 {
        data.groups.len().div_ceil(cfg.contexts_per_batch)
    } else {
        cfg.steps_per_epoch
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut params = params;
    let mut opt = Adamax::new(&params, cfg.learning_rate);
    let mut sched = ReduceOnPlateau::new(cfg.lr_decay, cfg.lr_patience);
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch = compose_batch(&data, cfg, &mut rng)?;
            let (loss, grads) = objective(&params, &data, &batch, cfg, true)?;
            let mut grads = grads.expect("gradient requested");
            if !loss.total.is_finite() || !grads.norm().is_finite() {
                return Err(G2rError::NonFiniteLoss {
                    step,
                    batch: batch.fingerprint(),
                });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut params, &grads);
            history.push(HistoryRow {
                step,
                ce: loss.ce,
                kd: loss.kd,
                total: loss.total,
                hits1: None,
                hits5: None,
                lr: opt.lr,
                wall_ms: if cfg.record_timing {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
            step += 1;
        }
        let ranks = valid_cands.encoder_ranks(&params, vocab)?;
        let h1 = hits_from_ranks(&ranks, 1);
        let h5 = hits_from_ranks(&ranks, 5.min(cfg.eval_k));
        if let Some(last) = history.last_mut() {
            last.hits1 = Some(h1);
            last.hits5 = Some(h5);
        }
        if best.as_ref().is_none_or(|(b, _, _)| h1 > *b) {
            best = Some((h1, epoch, params.clone()));
        }
        opt.lr = sched.observe(h1, opt.lr);
    }
    let (best_hits1, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_hits1,
        best_epoch,
    })
}
