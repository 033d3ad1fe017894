use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream, TeacherLM};
use crate::corpus::{Context, EOS, PAD, SEP, UNK};
use crate::error::{G2rError, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub block_context_trigrams: bool,
    pub block_response_trigrams: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_k: 20,
            min_len: 1,
            max_len: 40,
            block_context_trigrams: true,
            block_response_trigrams: true,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(G2rError::invalid(format!(
                "top_k {} outside [1, {vocab_size}]",
                self.top_k
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(G2rError::invalid(format!(
                "need 1 <= min_len ({}) <= max_len ({})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Draws one response by top-k sampling.
///
/// Per step: `<pad>` and `<sep>` are never emitted; `<eos>` is masked while
/// the response is shorter than `min_len`; the `top_k` most probable
/// remaining tokens (ties to the lower id) are kept; tokens completing a
/// blocked trigram are dropped; the survivors are renormalized and sampled.
/// If blocking empties the top-k, the most probable unblocked token is taken
/// instead. Generation stops at `<eos>` or at `max_len` tokens.
pub fn sample_response(teacher: &TeacherLM, context: &Context, cfg: &SamplingConfig) -> Result<Vec<String>> {
    let vocab = teacher.vocab();
    cfg.validate(vocab.len())?;
    let ctx_ids = vocab.context_ids(context);
    let ctx_trigrams: HashSet<[u32; 3]> = if cfg.block_context_trigrams {
        context
            .turns()
            .iter()
            .flat_map(|t| {
                let ids = vocab.ids(t);
                ids.windows(3).map(|w| [w[0], w[1], w[2]]).collect::<Vec<_>>()
            })
            .collect()
    } else {
        HashSet::new()
    };
    let mut resp_trigrams: HashSet<[u32; 3]> = HashSet::new();
    let mut rng = rng_from_seed(cfg.seed);
    let mut prefix = stream(vocab, &ctx_ids, &[]);
    let mut out: Vec<u32> = Vec::new();
    let mut order: Vec<u32> = Vec::with_capacity(vocab.len());

    while out.len() < cfg.max_len {
        let mut p = teacher.next_token_dist(&prefix);
        p[PAD as usize] = 0.0;
        p[SEP as usize] = 0.0;
        let eos_allowed = out.len() >= cfg.min_len;
        if !eos_allowed {
            p[EOS as usize] = 0.0;
        }
        let blocked = |w: u32| -> bool {
            if w == EOS || out.len() < 2 {
                return false;
            }
            let tri = [out[out.len() - 2], out[out.len() - 1], w];
            (cfg.block_response_trigrams && resp_trigrams.contains(&tri))
                || (cfg.block_context_trigrams && ctx_trigrams.contains(&tri))
        };

        order.clear();
        order.extend((0..p.len() as u32).filter(|&w| p[w as usize] > 0.0));
        order.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));
        let survivors: Vec<u32> = order
            .iter()
            .take(cfg.top_k)
            .copied()
            .filter(|&w| !blocked(w))
            .collect();

        let next = if survivors.is_empty() {
            match order.iter().copied().find(|&w| !blocked(w)) {
                Some(w) => w,
                None if eos_allowed => EOS,
                None => UNK,
            }
        } else {
            let mass: f64 = survivors.iter().map(|&w| p[w as usize]).sum();
            let mut x = rng.random::<f64>() * mass;
            let mut pick = *survivors.last().unwrap();
            for &w in &survivors {
                x -= p[w as usize];
                if x < 0.0 {
                    pick = w;
                    break;
                }
            }
            pick
        };

        if next == EOS {
            break;
        }
        if out.len() >= 2 {
            resp_trigrams.insert([out[out.len() - 2], out[out.len() - 1], next]);
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out.into_iter().map(|id| vocab.token(id).to_string()).collect())
}
