//! Interpolated trigram teacher.
//!
//! Each training pair becomes the id stream
//! `context tokens ‖ <sep> ‖ response tokens ‖ <eos>`, read with a two-token
//! history that starts as `(<pad>, <pad>)`. Every position is one count
//! event. Next-token probabilities interpolate the three orders
//! (Witten–Bell weights) down to an add-k unigram floor:
//!
//! ```text
//! P1(w)     = (c(w) + k) / (N + k·V)
//! P2(w|v)   = λ(v)·c(v,w)/c(v·)     + (1 − λ(v))·P1(w)
//! P3(w|u,v) = λ(u,v)·c(u,v,w)/c(uv·) + (1 − λ(u,v))·P2(w|v)
//! λ(h)      = c(h·) / (c(h·) + N1+(h·))      (0 for unseen h)
//! ```
//!
//! where `c(h·)` counts events after history `h` and `N1+(h·)` counts the
//! distinct tokens seen after it. Every distribution sums to one and is
//! strictly positive, so log-likelihoods are always finite.

mod sampling;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::{Context, DialogueDataset, Vocab, EOS, PAD, SEP, UNK};
use crate::error::{G2rError, Result};
use crate::rng::sha256_hex;

pub use sampling::{sample_response, SamplingConfig};

const MAGIC: &[u8; 4] = b"G2RT";
const VERSION: u16 = 1;

#[derive(Clone, Debug, Default)]
struct History {
    total: u64,
    followers: Vec<(u32, u64)>,
}

impl History {
    fn weight(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.total as f64 / (self.total + self.followers.len() as u64) as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherLM {
    vocab: Vocab,
    add_k: f64,
    trained_on: String,
    unigrams: Vec<u64>,
    bigrams: BTreeMap<(u32, u32), u64>,
    trigrams: BTreeMap<(u32, u32, u32), u64>,
    // Derived from the count tables.
    unigram_probs: Vec<f64>,
    bigram_hist: HashMap<u32, History>,
    trigram_hist: HashMap<(u32, u32), History>,
}

/// How the unconditional term of the MI score averages over dummy contexts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMean {
    /// Arithmetic mean of log-likelihoods (geometric mean of likelihoods).
    #[default]
    Log,
    /// Log of the arithmetic mean of likelihoods.
    Prob,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorScore {
    pub ll: f64,
    pub mi: Option<f64>,
}

/// Id stream for a pair, or for a context alone when `response` is empty.
fn stream(vocab: &Vocab, context: &[u32], response: &[String]) -> Vec<u32> {
    let mut s = Vec::with_capacity(context.len() + response.len() + 2);
    s.extend_from_slice(context);
    s.push(SEP);
    s.extend(response.iter().map(|t| vocab.id(t)));
    s
}

pub fn train_teacher(dataset: &DialogueDataset, add_k: f64) -> Result<TeacherLM> {
    if dataset.is_empty() {
        return Err(G2rError::Empty("cannot train a teacher on an empty dataset".into()));
    }
    if !(add_k > 0.0 && add_k.is_finite()) {
        return Err(G2rError::invalid("add-k constant must be positive"));
    }
    let vocab = Vocab::from_dataset(dataset);
    let mut unigrams = vec![0u64; vocab.len()];
    let mut bigrams = BTreeMap::new();
    let mut trigrams = BTreeMap::new();
    for p in &dataset.pairs {
        let mut s = stream(&vocab, &vocab.context_ids(&p.context), &p.response);
        s.push(EOS);
        let (mut u, mut v) = (PAD, PAD);
        for &w in &s {
            unigrams[w as usize] += 1;
            *bigrams.entry((v, w)).or_insert(0) += 1;
            *trigrams.entry((u, v, w)).or_insert(0) += 1;
            u = v;
            v = w;
        }
    }
    Ok(TeacherLM::from_counts(
        vocab,
        add_k,
        dataset.fingerprint(),
        unigrams,
        bigrams,
        trigrams,
    ))
}

impl TeacherLM {
    fn from_counts(
        vocab: Vocab,
        add_k: f64,
        trained_on: String,
        unigrams: Vec<u64>,
        bigrams: BTreeMap<(u32, u32), u64>,
        trigrams: BTreeMap<(u32, u32, u32), u64>,
    ) -> Self {
        let total: u64 = unigrams.iter().sum();
        let denom = total as f64 + add_k * vocab.len() as f64;
        let unigram_probs = unigrams.iter().map(|&c| (c as f64 + add_k) / denom).collect();
        let mut bigram_hist: HashMap<u32, History> = HashMap::new();
        for (&(v, w), &c) in &bigrams {
            let h = bigram_hist.entry(v).or_default();
            h.total += c;
            h.followers.push((w, c));
        }
        let mut trigram_hist: HashMap<(u32, u32), History> = HashMap::new();
        for (&(u, v, w), &c) in &trigrams {
            let h = trigram_hist.entry((u, v)).or_default();
            h.total += c;
            h.followers.push((w, c));
        }
        TeacherLM {
            vocab,
            add_k,
            trained_on,
            unigrams,
            bigrams,
            trigrams,
            unigram_probs,
            bigram_hist,
            trigram_hist,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Fingerprint of the dataset the counts came from.
    pub fn trained_on(&self) -> &str {
        &self.trained_on
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Next-token distribution after `prefix` (an id stream). Only the last
    /// two ids matter; shorter prefixes are left-padded with `<pad>`.
    pub fn next_token_dist(&self, prefix: &[u32]) -> Vec<f64> {
        let n = prefix.len();
        let v = if n >= 1 { prefix[n - 1] } else { PAD };
        let u = if n >= 2 { prefix[n - 2] } else { PAD };
        self.dist_after(u, v)
    }

    fn dist_after(&self, u: u32, v: u32) -> Vec<f64> {
        let empty = History::default();
        let bi = self.bigram_hist.get(&v).unwrap_or(&empty);
        let tri = self.trigram_hist.get(&(u, v)).unwrap_or(&empty);
        let (l2, l3) = (bi.weight(), tri.weight());
        let floor = (1.0 - l3) * (1.0 - l2);
        let mut p: Vec<f64> = self.unigram_probs.iter().map(|&q| floor * q).collect();
        if bi.total > 0 {
            let scale = (1.0 - l3) * l2 / bi.total as f64;
            for &(w, c) in &bi.followers {
                p[w as usize] += scale * c as f64;
            }
        }
        if tri.total > 0 {
            let scale = l3 / tri.total as f64;
            for &(w, c) in &tri.followers {
                p[w as usize] += scale * c as f64;
            }
        }
        p
    }

    /// Probability of `w` after history `(u, v)` without building the full vector.
    fn prob(&self, u: u32, v: u32, w: u32) -> f64 {
        let p1 = self.unigram_probs[w as usize];
        let p2 = match self.bigram_hist.get(&v) {
            Some(h) => {
                let c = self.bigrams.get(&(v, w)).copied().unwrap_or(0);
                let l = h.weight();
                l * c as f64 / h.total as f64 + (1.0 - l) * p1
            }
            None => p1,
        };
        match self.trigram_hist.get(&(u, v)) {
            Some(h) => {
                let c = self.trigrams.get(&(u, v, w)).copied().unwrap_or(0);
                let l = h.weight();
                l * c as f64 / h.total as f64 + (1.0 - l) * p2
            }
            None => p2,
        }
    }

    /// Sum of per-step log-probabilities of the response tokens and the
    /// closing `<eos>` given the windowed context and `<sep>`.
    pub fn log_likelihood(&self, context: &Context, response: &[String]) -> f64 {
        self.log_likelihood_ids(&self.vocab.context_ids(context), response)
    }

    fn log_likelihood_ids(&self, context: &[u32], response: &[String]) -> f64 {
        let mut s = stream(&self.vocab, context, response);
        s.push(EOS);
        let first = context.len() + 1;
        let mut total = 0.0;
        for t in first..s.len() {
            let v = s[t - 1];
            let u = if t >= 2 { s[t - 2] } else { PAD };
            total += self.prob(u, v, s[t]).ln();
        }
        total
    }

    /// Log-likelihood normalized by the response length (`<eos>` excluded).
    pub fn ll_score(&self, context: &Context, response: &[String]) -> Result<f64> {
        if response.is_empty() {
            return Err(G2rError::Empty("cannot score an empty response".into()));
        }
        Ok(self.log_likelihood(context, response) / response.len() as f64)
    }

    /// Dummy contexts standing in for the marginal: `.`, `<pad>` and `<unk>`.
    pub fn dummy_contexts(&self) -> [Vec<u32>; 3] {
        [vec![self.vocab.id(".")], vec![PAD], vec![UNK]]
    }

    /// Approximate `log P(r)` from the dummy-context likelihoods.
    pub fn unconditional_ll(&self, response: &[String], mean: MiMean) -> f64 {
        let lls: Vec<f64> = self
            .dummy_contexts()
            .iter()
            .map(|d| self.log_likelihood_ids(d, response))
            .collect();
        mean_of(&lls, mean)
    }

    /// `(log P(r|c) − log P(r)) / |r|`.
    pub fn mi_score(&self, context: &Context, response: &[String], mean: MiMean) -> Result<f64> {
        if response.is_empty() {
            return Err(G2rError::Empty("cannot score an empty response".into()));
        }
        let cond = self.log_likelihood(context, response);
        Ok((cond - self.unconditional_ll(response, mean)) / response.len() as f64)
    }

    pub fn score(
        &self,
        context: &Context,
        response: &[String],
        with_mi: Option<MiMean>,
    ) -> Result<GeneratorScore> {
        let ll = self.ll_score(context, response)?;
        let mi = with_mi
            .map(|m| self.mi_score(context, response, m))
            .transpose()?;
        Ok(GeneratorScore { ll, mi })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(MAGIC, VERSION);
        w.f64(self.add_k);
        w.str(&self.trained_on);
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        for &c in &self.unigrams {
            w.u64(c);
        }
        w.u64(self.bigrams.len() as u64);
        for (&(a, b), &c) in &self.bigrams {
            w.u32(a);
            w.u32(b);
            w.u64(c);
        }
        w.u64(self.trigrams.len() as u64);
        for (&(a, b, d), &c) in &self.trigrams {
            w.u32(a);
            w.u32(b);
            w.u32(d);
            w.u64(c);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = ByteReader::open(bytes, MAGIC, VERSION)?;
        let add_k = r.f64()?;
        let trained_on = r.str()?;
        let n = r.u32()? as usize;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_table(tokens)?;
        let unigrams = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let check = |id: u32| -> Result<u32> {
            if (id as usize) < n {
                Ok(id)
            } else {
                Err(G2rError::Format(format!("token id {id} out of range")))
            }
        };
        let mut bigrams = BTreeMap::new();
        for _ in 0..r.u64()? {
            let key = (check(r.u32()?)?, check(r.u32()?)?);
            bigrams.insert(key, r.u64()?);
        }
        let mut trigrams = BTreeMap::new();
        for _ in 0..r.u64()? {
            let key = (check(r.u32()?)?, check(r.u32()?)?, check(r.u32()?)?);
            trigrams.insert(key, r.u64()?);
        }
        r.expect_end()?;
        if !(add_k > 0.0) {
            return Err(G2rError::Format("add-k constant must be positive".into()));
        }
        Ok(Self::from_counts(vocab, add_k, trained_on, unigrams, bigrams, trigrams))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| G2rError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| G2rError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn mean_of(lls: &[f64], mean: MiMean) -> f64 {
    let n = lls.len() as f64;
    match mean {
        MiMean::Log => lls.iter().sum::<f64>() / n,
        MiMean::Prob => {
            let m = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + (lls.iter().map(|l| (l - m).exp()).sum::<f64>() / n).ln()
        }
    }
}
