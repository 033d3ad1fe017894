use rand::seq::index;

use crate::biencoder::{dot, EncoderParams};
use crate::corpus::{build_response_set, Context, DialogueDataset, ResponseSet, Vocab};
use crate::error::{G2rError, Result};
use crate::rng::rng_from_seed;

/// One evaluation case: the gold response id first, then `K − 1` distractors.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub context: Context,
    pub candidates: Vec<usize>,
}

/// Fixed Hits@N/K candidate lists over an evaluation split.
///
/// Distractors come from the split's own response set, drawn once from
/// `seed`, so every model is ranked against the same candidates.
#[derive(Clone, Debug)]
pub struct EvalCandidates {
    pub set: ResponseSet,
    pub cases: Vec<EvalCase>,
    pub k: usize,
}

impl EvalCandidates {
    pub fn new(eval: &DialogueDataset, k: usize, seed: u64) -> Result<Self> {
        let set = build_response_set(eval);
        if k == 0 || k > set.len() {
            return Err(G2rError::invalid(format!(
                "K = {k} must be in [1, {}] for this split",
                set.len()
            )));
        }
        let mut rng = rng_from_seed(seed);
        let cases = eval
            .pairs
            .iter()
            .map(|p| {
                let gold = set.id_of(&p.response).expect("response set built from this split");
                let mut candidates = Vec::with_capacity(k);
                candidates.push(gold);
                candidates.extend(
                    index::sample(&mut rng, set.len() - 1, k - 1)
                        .into_iter()
                        .map(|i| if i >= gold { i + 1 } else { i }),
                );
                EvalCase {
                    context: p.context.clone(),
                    candidates,
                }
            })
            .collect();
        Ok(EvalCandidates { set, cases, k })
    }

    /// Pessimistic 0-based gold rank per case: every distractor scoring at
    /// least as high as the gold ranks ahead of it.
    pub fn ranks<F>(&self, mut scorer: F) -> Vec<usize>
    where
        F: FnMut(&EvalCase, &ResponseSet) -> Vec<f64>,
    {
        self.cases
            .iter()
            .map(|case| {
                let s = scorer(case, &self.set);
                s[1..].iter().filter(|&&x| x >= s[0]).count()
            })
            .collect()
    }

    pub fn hits_with<F>(&self, n: usize, scorer: F) -> Result<f64>
    where
        F: FnMut(&EvalCase, &ResponseSet) -> Vec<f64>,
    {
        if n == 0 || self.k < n {
            return Err(G2rError::invalid(format!("need 1 <= N ({n}) <= K ({})", self.k)));
        }
        Ok(hits_from_ranks(&self.ranks(scorer), n))
    }

    /// Ranks under a trained encoder; response embeddings are computed once.
    pub fn encoder_ranks(&self, params: &EncoderParams, vocab: &Vocab) -> Result<Vec<usize>> {
        let resp = self
            .set
            .responses()
            .iter()
            .map(|r| params.encode_response_ids(&vocab.ids(r)))
            .collect::<Result<Vec<_>>>()?;
        let mut ranks = Vec::with_capacity(self.cases.len());
        for case in &self.cases {
            let c = params.encode_context_ids(&vocab.context_ids(&case.context))?;
            let s: Vec<f64> = case.candidates.iter().map(|&id| dot(&c, &resp[id])).collect();
            ranks.push(s[1..].iter().filter(|&&x| x >= s[0]).count());
        }
        Ok(ranks)
    }
}

pub fn hits_from_ranks(ranks: &[usize], n: usize) -> f64 {
    ranks.iter().filter(|&&r| r < n).count() as f64 / ranks.len() as f64
}

/// Hits@N/K of an encoder on an evaluation split.
pub fn hits_at(
    params: &EncoderParams,
    vocab: &Vocab,
    eval: &DialogueDataset,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if k < n || n == 0 {
        return Err(G2rError::invalid(format!("need 1 <= N ({n}) <= K ({k})")));
    }
    let cands = EvalCandidates::new(eval, k, seed)?;
    Ok(hits_from_ranks(&cands.encoder_ranks(params, vocab)?, n))
}
