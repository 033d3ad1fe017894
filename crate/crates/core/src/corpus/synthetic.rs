//! Seeded synthetic dialogue corpus.
//!
//! The vocabulary is split into common words (including `.` and `?`) and
//! `n_topics` topic blocks. A quarter of each block are keywords, a quarter
//! answer words, and the rest plain topic words; keyword `j` is answered by
//! answer word `j`. A pair picks a topic and a keyword, writes 1–3 context
//! turns mixing plain topic words and common words with the keyword as the
//! final token, and a response that opens with the matching answer word and
//! continues in the same way. Keywords and answers appear nowhere else, so a
//! bag-of-words model can learn the pairing.
//! Gold responses are unique within a generated dataset.

use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::{canonical, Context, DialogueDataset, DialoguePair, Source, Split};
use crate::error::{G2rError, Result};
use crate::rng::{rng_from_seed, G2rRng};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable(i: usize) -> [char; 2] {
    [
        CONSONANTS[i / VOWELS.len()] as char,
        VOWELS[i % VOWELS.len()] as char,
    ]
}

/// Pronounceable lowercase word for index `i`; injective.
fn word(i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let (digits, mut rest) = if i < base * base { (2, i) } else { (3, i - base * base) };
    let mut out = vec![0usize; digits];
    for d in out.iter_mut().rev() {
        *d = rest % base;
        rest /= base;
    }
    out.into_iter().flat_map(syllable).collect()
}

/// The seed-independent word layout behind [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    common: Vec<String>,
    keywords: Vec<Vec<String>>,
    answers: Vec<Vec<String>>,
    plain: Vec<Vec<String>>,
    topic_of: HashMap<String, usize>,
}

impl SyntheticWorld {
    pub fn new(vocab_size: usize, n_topics: usize) -> Result<Self> {
        if n_topics == 0 {
            return Err(G2rError::invalid("n_topics must be at least 1"));
        }
        if vocab_size < 10 * n_topics {
            return Err(G2rError::invalid(format!(
                "vocab_size {vocab_size} must be at least 10 * n_topics ({})",
                10 * n_topics
            )));
        }
        let topic_size = (vocab_size * 4 / 5) / n_topics;
        let n_common = vocab_size - topic_size * n_topics;
        let mut common = vec![".".to_string(), "?".to_string()];
        common.extend((0..n_common - 2).map(word));
        let mut keywords = Vec::with_capacity(n_topics);
        let mut answers = Vec::with_capacity(n_topics);
        let mut plain = Vec::with_capacity(n_topics);
        let mut topic_of = HashMap::new();
        let n_keys = topic_size / 4;
        for t in 0..n_topics {
            let offset = n_common - 2 + t * topic_size;
            let block: Vec<String> = (offset..offset + topic_size).map(word).collect();
            for w in &block {
                topic_of.insert(w.clone(), t);
            }
            keywords.push(block[..n_keys].to_vec());
            answers.push(block[n_keys..2 * n_keys].to_vec());
            plain.push(block[2 * n_keys..].to_vec());
        }
        Ok(SyntheticWorld {
            common,
            keywords,
            answers,
            plain,
            topic_of,
        })
    }

    pub fn n_topics(&self) -> usize {
        self.keywords.len()
    }

    /// Topic owning `token`, or `None` for common words.
    pub fn topic_of(&self, token: &str) -> Option<usize> {
        self.topic_of.get(token).copied()
    }

    /// Answer word paired with `keyword`.
    pub fn answer_for(&self, keyword: &str) -> Option<&str> {
        let t = self.topic_of(keyword)?;
        let j = self.keywords[t].iter().position(|k| k == keyword)?;
        Some(&self.answers[t][j])
    }

    /// Latent topic of a generated response: the topic of its opening word.
    pub fn response_topic(&self, response: &[String]) -> Option<usize> {
        response.first().and_then(|w| self.topic_of(w))
    }

    fn topic_word(&self, t: usize, rng: &mut G2rRng) -> String {
        self.plain[t][rng.random_range(0..self.plain[t].len())].clone()
    }

    fn filler(&self, t: usize, topic_prob: f64, rng: &mut G2rRng) -> String {
        if rng.random_bool(topic_prob) {
            self.topic_word(t, rng)
        } else {
            self.common[rng.random_range(0..self.common.len())].clone()
        }
    }

    fn pair(&self, rng: &mut G2rRng) -> (Vec<Vec<String>>, Vec<String>) {
        let t = rng.random_range(0..self.n_topics());
        let j = rng.random_range(0..self.keywords[t].len());
        let n_turns = rng.random_range(1..=3);
        let mut turns = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let len = rng.random_range(4..=9);
            turns.push((0..len).map(|_| self.filler(t, 0.5, rng)).collect::<Vec<_>>());
        }
        turns.last_mut().unwrap().push(self.keywords[t][j].clone());
        let mut response = vec![self.answers[t][j].clone()];
        let len = rng.random_range(3..=10);
        response.extend((0..len).map(|_| self.filler(t, 0.6, rng)));
        response.push(".".to_string());
        (turns, response)
    }
}

/// Deterministic synthetic corpus; see the module docs for its structure.
pub fn generate_synthetic(
    seed: u64,
    n_pairs: usize,
    vocab_size: usize,
    n_topics: usize,
) -> Result<DialogueDataset> {
    if n_pairs == 0 {
        return Err(G2rError::invalid("n_pairs must be at least 1"));
    }
    let world = SyntheticWorld::new(vocab_size, n_topics)?;
    let mut rng = rng_from_seed(seed);
    let mut seen = HashSet::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let mut attempts = 0;
        let (turns, response) = loop {
            let (turns, response) = world.pair(&mut rng);
            if seen.insert(canonical(&response)) {
                break (turns, response);
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(G2rError::invalid(
                    "vocabulary too small to produce unique responses",
                ));
            }
        };
        pairs.push(DialoguePair::new(Context::new(turns)?, response, Source::Original)?);
    }
    DialogueDataset::new(pairs, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_response_set;

    #[test]
    fn words_are_distinct() {
        let words: HashSet<String> = (0..6000).map(word).collect();
        assert_eq!(words.len(), 6000);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(3, 200, 300, 10).unwrap();
        let b = generate_synthetic(3, 200, 300, 10).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = generate_synthetic(4, 200, 300, 10).unwrap();
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn rejects_small_vocab() {
        assert!(generate_synthetic(0, 10, 99, 10).is_err());
        assert!(generate_synthetic(0, 0, 100, 10).is_err());
        assert!(generate_synthetic(0, 10, 100, 0).is_err());
    }

    #[test]
    fn pairs_stay_within_one_topic() {
        let world = SyntheticWorld::new(400, 10).unwrap();
        let ds = generate_synthetic(1, 1000, 400, 10).unwrap();
        for p in &ds.pairs {
            let t = world.response_topic(&p.response).unwrap();
            let topics: HashSet<usize> = p
                .context
                .all_turns()
                .iter()
                .flatten()
                .chain(&p.response)
                .filter_map(|w| world.topic_of(w))
                .collect();
            assert_eq!(topics, HashSet::from([t]));
            let keyword = p.context.all_turns().last().unwrap().last().unwrap();
            assert_eq!(world.answer_for(keyword), Some(p.response[0].as_str()));
            let keywords = p
                .context
                .all_turns()
                .iter()
                .flatten()
                .chain(&p.response)
                .filter(|w| world.answer_for(w).is_some())
                .count();
            assert_eq!(keywords, 1);
        }
        assert_eq!(build_response_set(&ds).len(), ds.len());
    }
}
